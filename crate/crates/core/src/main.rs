fn main() {
    std::process::exit(ctxsynth::cli::run(std::env::args_os()));
}
