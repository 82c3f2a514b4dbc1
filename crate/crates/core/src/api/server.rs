//! A small threaded HTTP server carrying JSON requests to a handler.

use std::io::Read;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use tiny_http::{Header, Request, Response, Server};

use super::router::{Api, ApiRequest, ApiResponse};

/// Largest request body accepted.
const MAX_BODY: u64 = 8 << 20;

pub type Handler = Arc<dyn Fn(&ApiRequest) -> ApiResponse + Send + Sync>;

pub struct HttpServer {
    addr: SocketAddr,
    server: Arc<Server>,
    workers: Vec<JoinHandle<()>>,
}

impl HttpServer {
    /// Binds `listen` and serves requests on `workers` threads.
    pub fn start(listen: &str, workers: usize, handler: Handler) -> std::io::Result<Self> {
        let server = Server::http(listen).map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::AddrNotAvailable, e.to_string())
        })?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("listener has no IP address"))?;
        let server = Arc::new(server);
        let workers = (0..workers.max(1))
            .map(|_| {
                let server = Arc::clone(&server);
                let handler = Arc::clone(&handler);
                std::thread::spawn(move || {
                    for request in server.incoming_requests() {
                        respond(request, &handler);
                    }
                })
            })
            .collect();
        Ok(HttpServer {
            addr,
            server,
            workers,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the server is shut down from elsewhere.
    pub fn wait(self) {
        for worker in self.workers {
            let _ = worker.join();
        }
    }

    pub fn shutdown(self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        self.wait();
    }
}

fn respond(mut request: Request, handler: &Handler) {
    let authorization = request
        .headers()
        .iter()
        .find(|h| h.field.equiv("Authorization"))
        .map(|h| h.value.as_str().to_owned());
    let mut body = Vec::new();
    let read = request.as_reader().take(MAX_BODY).read_to_end(&mut body);
    let response = match read {
        Ok(_) => {
            let mut api_request = ApiRequest::new(request.method().as_str(), request.url());
            api_request.authorization = authorization;
            api_request.body = body;
            handler(&api_request)
        }
        Err(err) => ApiResponse {
            status: 400,
            body: serde_json::json!({"error": "malformed-request", "message": err.to_string()}),
        },
    };
    log::debug!(
        "{} {} -> {}",
        request.method(),
        request.url(),
        response.status
    );
    let content_type =
        Header::from_bytes("Content-Type", "application/json").expect("static header is valid");
    let reply = Response::from_string(response.body.to_string())
        .with_status_code(response.status)
        .with_header(content_type);
    if let Err(err) = request.respond(reply) {
        log::warn!("failed to send response: {err}");
    }
}

/// Serves the control-plane API.
pub fn serve(api: Arc<Api>, listen: &str, workers: usize) -> std::io::Result<HttpServer> {
    HttpServer::start(
        listen,
        workers,
        Arc::new(move |request| api.handle(request)),
    )
}
