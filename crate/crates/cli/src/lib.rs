//! Command-line front end and HTTP annotation service.

pub mod args;
pub mod commands;
pub mod server;

/// Machine-readable form of an error, as printed on stderr.
pub fn error_json(e: &anyhow::Error) -> serde_json::Value {
    let kind = e
        .chain()
        .find_map(|c| c.downcast_ref::<refinery_core::Error>())
        .map_or("error", |c| c.kind());
    serde_json::json!({ "error": kind, "message": format!("{e:#}") })
}
