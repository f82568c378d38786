fn main() {
    std::process::exit(mice::gateway::main_with_args(std::env::args_os()));
}
