use tokio::net::TcpListener;

const DEFAULT_ADDR: &str = "127.0.0.1:8650";

#[tokio::main]
async fn main() {
    let addr = std::env::args()
        .nth(1)
        .or_else(|| std::env::var("DDNET_ADDR").ok())
        .unwrap_or_else(|| DEFAULT_ADDR.to_string());
    let listener = match TcpListener::bind(&addr).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error[io]: cannot bind {addr}: {e}");
            std::process::exit(1);
        }
    };
    eprintln!("ddnet-server listening on http://{}", listener.local_addr().unwrap());
    if let Err(e) = ddnet_service::serve(listener).await {
        eprintln!("error[io]: {e}");
        std::process::exit(1);
    }
}
