fn main() {
    grpo_forge_cli::init_logging();
    std::process::exit(grpo_forge_cli::run_args(std::env::args_os()));
}
