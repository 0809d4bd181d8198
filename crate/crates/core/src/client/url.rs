use std::fmt;
use std::path::PathBuf;

use crate::storage::Target;
use crate::transport::Endpoint;

/// One side of a copy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Url {
    /// `xdfs://host:port/path`; `path` keeps its leading `/`.
    Xdfs { endpoint: Endpoint, path: String },
    /// `file:path` or a bare path.
    File(PathBuf),
    /// `zero:N`, source only.
    Zero(u64),
    /// `null:`, destination only.
    Null,
}

impl Url {
    pub fn parse(s: &str) -> Result<Url, String> {
        if let Some(rest) = s.strip_prefix("xdfs://") {
            let (authority, path) = match rest.find('/') {
                Some(i) => rest.split_at(i),
                None => return Err(format!("{s:?} has no remote path")),
            };
            if path.len() < 2 {
                return Err(format!("{s:?} has an empty remote path"));
            }
            let endpoint = Endpoint::parse(authority).map_err(|_| format!("bad host:port in {s:?}"))?;
            return Ok(Url::Xdfs {
                endpoint,
                path: path.to_string(),
            });
        }
        if let Some(p) = s.strip_prefix("file:") {
            let p = p.strip_prefix("//").unwrap_or(p);
            if p.is_empty() {
                return Err("file: needs a path".into());
            }
            return Ok(Url::File(PathBuf::from(p)));
        }
        if let Some(t) = Target::pseudo(s) {
            return t.map(|t| match t {
                Target::Zero(n) => Url::Zero(n),
                Target::Null => Url::Null,
                Target::File(p) => Url::File(p),
            });
        }
        if s.is_empty() || s.contains("://") {
            return Err(format!("unsupported url {s:?}"));
        }
        Ok(Url::File(PathBuf::from(s)))
    }

    pub fn is_remote(&self) -> bool {
        matches!(self, Url::Xdfs { .. })
    }

    /// The local storage this url names; `None` for remote urls.
    pub fn target(&self) -> Option<Target> {
        match self {
            Url::Xdfs { .. } => None,
            Url::File(p) => Some(Target::File(p.clone())),
            Url::Zero(n) => Some(Target::Zero(*n)),
            Url::Null => Some(Target::Null),
        }
    }
}

impl fmt::Display for Url {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Url::Xdfs { endpoint, path } => write!(f, "xdfs://{endpoint}{path}"),
            Url::File(p) => write!(f, "file:{}", p.display()),
            Url::Zero(n) => write!(f, "zero:{n}"),
            Url::Null => f.write_str("null:"),
        }
    }
}

/// `4096`, `64K`, `64KiB`, `1M`, `1MiB`, `2G`: binary multiples.
pub fn parse_bytes(s: &str) -> Result<u64, String> {
    let t = s.trim();
    let split = t.find(|c: char| !c.is_ascii_digit()).unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let n: u64 = num.parse().map_err(|_| format!("bad byte count {s:?}"))?;
    let mult: u64 = match unit.to_ascii_lowercase().as_str() {
        "" | "b" => 1,
        "k" | "kb" | "kib" => 1 << 10,
        "m" | "mb" | "mib" => 1 << 20,
        "g" | "gb" | "gib" => 1 << 30,
        _ => return Err(format!("bad unit in {s:?}")),
    };
    n.checked_mul(mult).ok_or_else(|| format!("{s:?} overflows"))
}
