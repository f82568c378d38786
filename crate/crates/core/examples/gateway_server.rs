//! Serve the HTTP API with sessions persisted under a store directory.
//!
//! cargo run --example gateway_server -- 127.0.0.1:8080 /tmp/mice-store
//!
//! Then, for example:
//!   curl -s localhost:8080/catalogue
//!   curl -s -XPOST localhost:8080/sessions -d @new_session.json

use std::sync::Arc;

use mice::gateway::{serve, Gateway, Store};
use mice::registry::Catalogue;
use mice::session::SystemClock;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let addr = args.next().unwrap_or_else(|| "127.0.0.1:8080".into());
    let store = match args.next() {
        Some(dir) => Store::open(dir)?,
        None => Store::from_env(std::env::temp_dir().join("mice-store"))?,
    };
    println!("serving on {addr}, sessions in {}", store.root().display());
    let gateway = Gateway::with_store(Catalogue::builtin(), Arc::new(SystemClock), store)?;
    serve(&addr, gateway).await?;
    Ok(())
}
