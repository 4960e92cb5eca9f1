//! Checkpoint files.
//!
//! ```text
//! PSTCKPT 1
//! [config] <lines>        canonical `key = value` run configuration
//! [vocab] <lines>         one token per line, in id order
//! [meta] <lines>          free-form `key = value`
//! [tensors] <lines>       `<name> <d0,d1,...> <offset>` (offset in floats)
//! [data]
//! <raw little-endian f32>
//! ```
//!
//! Files are written to a temporary sibling and renamed into place, so a
//! reader never sees a partial checkpoint.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use pst_autodiff::Tensor;

use crate::config::RunConfig;
use crate::corpus::Vocab;
use crate::error::{io_err, Error, Result};

const MAGIC: &str = "PSTCKPT 1";

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
    origin: &'b str,
}

impl<'b> Reader<'b> {
    fn err(&self, msg: String) -> Error {
        Error::Checkpoint {
            path: self.origin.to_string(),
            msg,
        }
    }

    fn line(&mut self) -> Result<&'b str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| self.err("truncated header".into()))?;
        let line = std::str::from_utf8(&rest[..end]).map_err(|_| self.err("header is not UTF-8".into()))?;
        self.pos += end + 1;
        Ok(line)
    }

    fn section(&mut self, name: &str) -> Result<Vec<String>> {
        let head = self.line()?;
        let count = head
            .strip_prefix(&format!("[{name}] "))
            .and_then(|c| c.parse::<usize>().ok())
            .ok_or_else(|| self.err(format!("expected [{name}] section, got `{head}`")))?;
        (0..count).map(|_| self.line().map(str::to_string)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(config: RunConfig, vocab: Vocab) -> Self {
        let mut meta = BTreeMap::new();
        meta.insert("config_hash".to_string(), config.hash());
        Self {
            config,
            vocab,
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        self.meta(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint {
                path: String::new(),
                msg: format!("missing or bad meta `{key}`"),
            })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = String::new();
        let _ = writeln!(head, "{MAGIC}");
        let config = self.config.canonical_text();
        let _ = writeln!(head, "[config] {}", config.lines().count());
        head.push_str(&config);
        let _ = writeln!(head, "[vocab] {}", self.vocab.len());
        for t in self.vocab.tokens() {
            let _ = writeln!(head, "{t}");
        }
        let _ = writeln!(head, "[meta] {}", self.meta.len());
        for (k, v) in &self.meta {
            let _ = writeln!(head, "{k} = {v}");
        }
        let _ = writeln!(head, "[tensors] {}", self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(head, "{name} {} {offset}", dims.join(","));
            offset += t.numel();
        }
        let _ = writeln!(head, "[data]");
        let mut bytes = head.into_bytes();
        bytes.reserve(offset * 4);
        for (_, t) in &self.tensors {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint {
            path: origin.to_string(),
            msg,
        };
        let mut r = Reader { bytes, pos: 0, origin };
        if r.line()? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let config_lines = r.section("config")?;
        let vocab_lines = r.section("vocab")?;
        let meta_lines = r.section("meta")?;
        let tensor_lines = r.section("tensors")?;
        if r.line()? != "[data]" {
            return Err(bad("missing [data] marker".into()));
        }
        let data = &bytes[r.pos..];

        let config = RunConfig::parse(&config_lines.join("\n"))?;
        let vocab = Vocab::from_tokens(vocab_lines)?;
        let mut meta = BTreeMap::new();
        for l in meta_lines {
            let (k, v) = l.split_once(" = ").ok_or_else(|| bad(format!("bad meta line `{l}`")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let mut tensors = Vec::with_capacity(tensor_lines.len());
        for l in tensor_lines {
            let parts: Vec<&str> = l.split(' ').collect();
            let [name, dims, offset] = parts[..] else {
                return Err(bad(format!("bad tensor line `{l}`")));
            };
            let shape: Vec<usize> = dims
                .split(',')
                .map(|d| d.parse().map_err(|_| bad(format!("bad dims `{dims}`"))))
                .collect::<Result<_>>()?;
            let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset `{offset}`")))?;
            let n: usize = shape.iter().product();
            let range = offset * 4..(offset + n) * 4;
            let raw = data.get(range).ok_or_else(|| bad(format!("tensor `{name}` runs past the data")))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name.to_string(), Tensor::new(&shape, values)?));
        }
        Ok(Self {
            config,
            vocab,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        std::fs::write(&tmp, self.to_bytes()).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let vocab = Vocab::build(["a b c"], 1).unwrap();
        let mut ck = Checkpoint::new(RunConfig::default(), vocab);
        ck.meta.insert("step".into(), "12".into());
        ck.tensors.push(("x".into(), Tensor::new(&[2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.0]).unwrap()));
        ck.tensors.push(("y".into(), Tensor::new(&[3], vec![7.0, 8.0, 9.0]).unwrap()));
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back.config, ck.config);
        assert_eq!(back.vocab, ck.vocab);
        assert_eq!(back.meta, ck.meta);
        for ((n1, t1), (n2, t2)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert!(t1.bit_eq(t2));
        }
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.meta("config_hash"), Some(ck.config.hash().as_str()));
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(Checkpoint::from_bytes(b"hello\n", "x").is_err());
        let vocab = Vocab::build(["a"], 1).unwrap();
        let mut ck = Checkpoint::new(RunConfig::default(), vocab);
        ck.tensors.push(("x".into(), Tensor::new(&[4], vec![1.0; 4]).unwrap()));
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], "x").is_err());
    }
}
