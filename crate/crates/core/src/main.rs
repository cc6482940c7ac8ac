fn main() {
    std::process::exit(resnet_ablation::cli::run(std::env::args_os()));
}
