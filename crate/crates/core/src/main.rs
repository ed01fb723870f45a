fn main() {
    std::process::exit(stereo_crf::cli::run(std::env::args_os()));
}
