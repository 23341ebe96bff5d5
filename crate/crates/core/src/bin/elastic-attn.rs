fn main() {
    std::process::exit(elastic_attention::cli::main());
}
