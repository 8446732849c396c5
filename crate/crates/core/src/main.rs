fn main() {
    std::process::exit(swin_res_net::cli::cli_main(std::env::args_os()));
}
