use std::path::Path;

/// A problem the user can fix (bad config, missing input, missing upstream
/// artifact). Exits with code 2; anything else exits with 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UserError(pub String);

pub type Result<T> = anyhow::Result<T>;

pub fn user(msg: impl Into<String>) -> anyhow::Error {
    UserError(msg.into()).into()
}

/// Error for a required input that is not there.
pub fn missing(what: &str, path: &Path, producer: Option<&str>) -> anyhow::Error {
    match producer {
        Some(cmd) => user(format!("{what} not found at {}; run `camlabel {cmd}` first", path.display())),
        None => user(format!("{what} not found at {}", path.display())),
    }
}

pub fn require(what: &str, path: &Path, producer: Option<&str>) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(missing(what, path, producer))
    }
}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UserError>().is_some() {
        2
    } else {
        1
    }
}
