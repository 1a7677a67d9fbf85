use clap::Parser;

#[tokio::main]
async fn main() {
    let cli = ddnet_cli::Cli::parse();
    if let Err(e) = ddnet_cli::run(cli).await {
        eprintln!("{e}");
        std::process::exit(if e.category == "argument" { 2 } else { 1 });
    }
}
