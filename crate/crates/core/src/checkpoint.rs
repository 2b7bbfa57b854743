//! Text checkpoints with a trailing SHA-256 line.
//!
//! Layout (every float with 17 significant digits, so values round-trip
//! exactly):
//!
//! ```text
//! grpo-forge-checkpoint 1
//! algorithm <id>
//! rng seed=<u64> next_step=<n>
//! window capacity=<W> entries=<k>
//! <step> <mean>            (k lines)
//! pending <m>
//! <vanishing ratio>        (m lines)
//! value dim=<d>
//! <bias>
//! <weight>                 (d lines)
//! current | old | reference, each followed by a policy block
//! sha256 <hex of every preceding byte>
//! ```

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::algorithms::{Algorithm, ValueParams};
use crate::augmentation::{ReplayWindow, WindowEntry};
use crate::policy::{PolicyParams, PolicyShape, PolicyTriple};
use crate::{Error, Result};

const MAGIC: &str = "grpo-forge-checkpoint 1";

/// Everything needed to continue a run as if it had never stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub algorithm: Algorithm,
    /// All randomness is derived from `(seed, step, ...)`, so the seed and
    /// the next step index fully describe the generator state.
    pub seed: u64,
    pub next_step: usize,
    pub triple: PolicyTriple,
    pub value: ValueParams,
    pub window: ReplayWindow,
    /// Vanishing ratios of steps since the last evaluation row.
    pub pending_vanishing: Vec<f64>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn digest(body: &str) -> String {
    hex(&Sha256::digest(body.as_bytes()))
}

fn float(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse<T: FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Parse(format!("bad {what} `{s}`")))
}

fn keyed<'a>(tok: Option<&'a str>, key: &str) -> Result<&'a str> {
    tok.and_then(|t| t.strip_prefix(key)?.strip_prefix('='))
        .ok_or_else(|| Error::Parse(format!("expected `{key}=`")))
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(MAGIC);
        s.push('\n');
        let _ = writeln!(s, "algorithm {}", self.algorithm.id());
        let _ = writeln!(s, "rng seed={} next_step={}", self.seed, self.next_step);
        let _ = writeln!(s, "window capacity={} entries={}", self.window.capacity(), self.window.len());
        for e in self.window.entries() {
            let _ = writeln!(s, "{} {}", e.step, float(e.mean_reward));
        }
        let _ = writeln!(s, "pending {}", self.pending_vanishing.len());
        for v in &self.pending_vanishing {
            let _ = writeln!(s, "{}", float(*v));
        }
        let _ = writeln!(s, "value dim={}", self.value.weights.len());
        let _ = writeln!(s, "{}", float(self.value.bias));
        for w in &self.value.weights {
            let _ = writeln!(s, "{}", float(*w));
        }
        for (name, p) in [
            ("current", &self.triple.current),
            ("old", &self.triple.old),
            ("reference", self.triple.reference()),
        ] {
            s.push_str(name);
            s.push('\n');
            s.push_str(&p.to_text());
        }
        let sum = digest(&s);
        let _ = writeln!(s, "sha256 {sum}");
        s
    }

    /// Parse and verify. With `expected`, a checkpoint for a different
    /// parameterization is rejected with a descriptor error.
    pub fn from_text(text: &str, expected: Option<&PolicyShape>) -> Result<Self> {
        let body_end = text
            .rfind("sha256 ")
            .ok_or_else(|| Error::Integrity("missing checksum line".into()))?;
        let (body, tail) = text.split_at(body_end);
        let stored = tail["sha256 ".len()..].trim();
        if digest(body) != stored {
            return Err(Error::Integrity("checksum mismatch".into()));
        }
        let mut lines = body.lines();
        let mut next = |what: &str| lines.next().ok_or_else(|| Error::Parse(format!("truncated before {what}")));
        if next("magic")? != MAGIC {
            return Err(Error::Parse("not a checkpoint file".into()));
        }
        let algorithm: Algorithm = next("algorithm")?
            .strip_prefix("algorithm ")
            .ok_or_else(|| Error::Parse("missing algorithm line".into()))?
            .parse()?;
        let rng_line = next("rng")?;
        let mut rng = rng_line.split_whitespace().skip(1);
        let seed = parse(keyed(rng.next(), "seed")?, "seed")?;
        let next_step = parse(keyed(rng.next(), "next_step")?, "step")?;

        let wline = next("window")?;
        let mut w = wline.split_whitespace().skip(1);
        let capacity: usize = parse(keyed(w.next(), "capacity")?, "capacity")?;
        let count: usize = parse(keyed(w.next(), "entries")?, "count")?;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let l = next("window entry")?;
            let (step, mean) = l
                .split_once(' ')
                .ok_or_else(|| Error::Parse(format!("bad window entry `{l}`")))?;
            entries.push(WindowEntry {
                step: parse(step, "step")?,
                mean_reward: parse(mean, "mean")?,
            });
        }
        let window = ReplayWindow::from_entries(capacity, entries)?;

        let pl = next("pending")?;
        let m: usize = parse(pl.strip_prefix("pending ").unwrap_or(""), "pending count")?;
        let pending_vanishing = (0..m)
            .map(|_| parse(next("pending value")?, "ratio"))
            .collect::<Result<Vec<f64>>>()?;

        let vl = next("value")?;
        let d: usize = parse(keyed(vl.split_whitespace().nth(1), "dim")?, "dim")?;
        let bias = parse(next("value bias")?, "bias")?;
        let weights = (0..d)
            .map(|_| parse(next("value weight")?, "weight"))
            .collect::<Result<Vec<f64>>>()?;

        let mut policies = Vec::with_capacity(3);
        for name in ["current", "old", "reference"] {
            if lines.next() != Some(name) {
                return Err(Error::Parse(format!("missing `{name}` section")));
            }
            policies.push(PolicyParams::from_lines(&mut lines)?);
        }
        let reference = policies.pop().expect("three policies");
        let old = policies.pop().expect("three policies");
        let current = policies.pop().expect("three policies");
        if let Some(want) = expected {
            if current.shape() != want {
                return Err(Error::Descriptor(format!(
                    "checkpoint holds {:?}, run expects {:?}",
                    current.shape(),
                    want
                )));
            }
        }
        Ok(Self {
            algorithm,
            seed,
            next_step,
            triple: PolicyTriple::from_parts(current, old, reference)?,
            value: ValueParams { weights, bias },
            window,
            pending_vanishing,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, expected: Option<&PolicyShape>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, expected)
    }
}
