fn main() {
    std::process::exit(pie_ope::cli::cli_main(std::env::args_os()));
}
