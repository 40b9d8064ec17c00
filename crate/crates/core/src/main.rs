fn main() {
    std::process::exit(gmi_lab::cli::main_with_args(std::env::args_os()));
}
