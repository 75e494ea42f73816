//! Checkpoint files: a UTF-8 manifest followed by a little-endian `f32`
//! payload.
//!
//! ```text
//! mcl-checkpoint v1
//! config_hash 3f1a...
//! objective ssl
//! step 310
//! dtype f32-le
//! entry 0 432 16x3x3x3 online/backbone.stem.conv.weight
//! ...
//! payload_bytes 1234567
//! end
//! <payload>
//! ```
//!
//! Entry offsets and lengths are in bytes, relative to the first payload
//! byte. Files are written to a temporary sibling and renamed into place, so
//! a crash never leaves a torn checkpoint behind.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, ensure, Context};

const MAGIC: &str = "mcl-checkpoint v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub objective: String,
    /// Optimizer steps already taken.
    pub step: usize,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> anyhow::Result<Vec<u8>> {
        let mut manifest = format!(
            "{MAGIC}\nconfig_hash {}\nobjective {}\nstep {}\ndtype f32-le\n",
            self.config_hash, self.objective, self.step
        );
        let mut offset = 0usize;
        for e in &self.entries {
            ensure!(
                !e.name.is_empty() && !e.name.contains(char::is_whitespace),
                "entry name {:?} must be non-empty without whitespace",
                e.name
            );
            ensure!(e.shape.iter().product::<usize>() == e.data.len(), "entry {} has {} values for shape {:?}", e.name, e.data.len(), e.shape);
            let len = 4 * e.data.len();
            let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("entry {offset} {len} {} {}\n", dims.join("x"), e.name));
            offset += len;
        }
        manifest.push_str(&format!("payload_bytes {offset}\nend\n"));
        let mut out = manifest.into_bytes();
        out.reserve(offset);
        for e in &self.entries {
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> anyhow::Result<Self> {
        let end = bytes
            .windows(5)
            .position(|w| w == b"\nend\n")
            .context("checkpoint manifest has no `end` line")?;
        let manifest = std::str::from_utf8(&bytes[..end]).context("manifest is not UTF-8")?;
        let payload = &bytes[end + 5..];
        let mut lines = manifest.lines();
        if lines.next() != Some(MAGIC) {
            bail!("not an mcl checkpoint (expected `{MAGIC}`)");
        }
        let (mut hash, mut objective, mut step, mut total) = (None, None, None, None);
        let mut entries = vec![];
        for line in lines {
            let (key, rest) = line.split_once(' ').with_context(|| format!("malformed manifest line {line:?}"))?;
            match key {
                "config_hash" => hash = Some(rest.to_string()),
                "objective" => objective = Some(rest.to_string()),
                "step" => step = Some(rest.parse::<usize>()?),
                "dtype" => ensure!(rest == "f32-le", "unsupported dtype {rest}"),
                "payload_bytes" => total = Some(rest.parse::<usize>()?),
                "entry" => {
                    let parts: Vec<&str> = rest.split(' ').collect();
                    ensure!(parts.len() == 4, "malformed entry line {line:?}");
                    let (off, len): (usize, usize) = (parts[0].parse()?, parts[1].parse()?);
                    let shape = if parts[2].is_empty() {
                        vec![]
                    } else {
                        parts[2].split('x').map(|d| d.parse()).collect::<Result<Vec<usize>, _>>()?
                    };
                    ensure!(len == 4 * shape.iter().product::<usize>(), "entry {} length disagrees with its shape", parts[3]);
                    let raw = payload
                        .get(off..off + len)
                        .with_context(|| format!("entry {} points past the payload", parts[3]))?;
                    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
                    entries.push(Entry {
                        name: parts[3].to_string(),
                        shape,
                        data,
                    });
                }
                _ => bail!("unknown manifest key {key:?}"),
            }
        }
        let total = total.context("manifest lacks payload_bytes")?;
        ensure!(payload.len() == total, "payload is {} bytes, manifest says {total}", payload.len());
        Ok(Self {
            config_hash: hash.context("manifest lacks config_hash")?,
            objective: objective.context("manifest lacks objective")?,
            step: step.context("manifest lacks step")?,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path).with_context(|| format!("moving checkpoint into {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("parsing checkpoint {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config_hash: "ab12".into(),
            objective: "ssl".into(),
            step: 42,
            entries: vec![
                Entry {
                    name: "online/w".into(),
                    shape: vec![2, 3],
                    data: vec![1.0, -2.5, f32::MIN_POSITIVE, 0.0, -0.0, 3.25e-7],
                },
                Entry {
                    name: "lars/scalar".into(),
                    shape: vec![],
                    data: vec![7.0],
                },
            ],
        }
    }

    #[test]
    fn bytes_round_trip_bitwise() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.step, 42);
        for (a, b) in c.entries.iter().zip(&back.entries) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.data), bits(&b.data));
        }
    }

    #[test]
    fn manifest_is_text_with_offsets() {
        let bytes = sample().to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.contains("entry 0 24 2x3 online/w\n"));
        assert!(text.contains("entry 24 4  lars/scalar\n"));
        assert!(text.contains("payload_bytes 28\nend\n"));
    }

    #[test]
    fn corrupt_files_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(Checkpoint::from_bytes(b"hello\nend\n").is_err());
    }

    #[test]
    fn save_replaces_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        sample().save(&path).unwrap();
        let mut c = sample();
        c.step = 43;
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap().step, 43);
        assert!(!path.with_extension("tmp").exists());
    }
}
