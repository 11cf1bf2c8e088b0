//! A certificate authority, a service that requires client certificates,
//! and three clients: trusted, stranger and revoked.
//!
//! cargo run --example mutual_tls

use axum::routing::get;
use axum::{Extension, Router};
use detstream::identity::signer::SignOptions;
use detstream::identity::tls::{client_config, server_config};
use detstream::identity::{sign_identity, AccessLog, Identity, SignatureDb, TrustStore};
use detstream::net::{HttpAuth, HttpClient, HttpServer, Peer};

#[tokio::main]
async fn main() {
    let dir = tempfile::tempdir().unwrap();
    let db = SignatureDb::open(dir.path().join("signatures.json"));
    let ca = Identity::generate("example-ca").unwrap();

    // Each deployment keeps its own key; the signer only ever sees public keys.
    let issue = |name: &str| {
        let mut id = Identity::generate(name).unwrap();
        let (pem, rec) = sign_identity(&ca, &id.public_key_pem(), name, &db, &SignOptions::default()).unwrap();
        id.install_certificate(&pem, vec![]).unwrap();
        (id, rec.serial)
    };
    let (service, _) = issue("jobs-api");
    let (alice, _) = issue("alice");
    let (mallory, mallory_serial) = issue("mallory");
    db.revoke(mallory_serial).unwrap();
    let eve = Identity::generate("eve").unwrap();

    let log = AccessLog::memory();
    let app = Router::new().route("/whoami", get(|Extension(p): Extension<Peer>| async move { format!("hello {}", p.0) }));
    let tls = server_config(&service, Some(ca.certificate().clone()), Some(db.clone())).unwrap();
    let srv = HttpServer::bind("127.0.0.1:0", app, HttpAuth::MutualTls(tls), log.clone()).await.unwrap();

    let mut trust = TrustStore::new();
    trust
        .add("jobs-api", &format!("https://{}", srv.local_addr()), &ca.certificate_pem())
        .unwrap();
    let entry = trust.resolve("jobs-api").unwrap();

    for (who, id) in [("alice", &alice), ("eve", &eve), ("mallory", &mallory)] {
        let client = HttpClient::with_tls(client_config(Some(id), entry.issuer().unwrap()).unwrap());
        match client.get(&format!("{}/whoami", entry.url)).await {
            Ok(r) if r.is_success() => println!("{who}: {}", r.text()),
            Ok(r) => println!("{who}: HTTP {}", r.status),
            Err(e) => println!("{who}: rejected: {e}"),
        }
    }
    srv.shutdown().await;
    // the server log names each client and why it was turned away
    for line in log.lines() {
        println!("{line}");
    }
}
