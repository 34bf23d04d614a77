//! Plain-text parameter checkpoints.
//!
//! ```text
//! mfviflow v1
//! data.b0.c.in.w shape<1,64>
//! 1.2345678901234567e-1
//! ...
//! ```
//!
//! One header line, optional `#` comment lines, then for every parameter a `name shape<d1,d2,...>` line
//! followed by its values in row-major order, one per line, with 17
//! significant digits so every `f64` round-trips exactly. Parameters appear
//! in the flow's construction order.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::conditional::{ConditionalArch, ConditionalFlow};
use super::params::ParamStore;
use crate::diff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_HEADER: &str = "mfviflow v1";
const MAGIC: &str = "mfviflow";

fn lanes(flow: &ConditionalFlow) -> [(&'static str, &ParamStore); 2] {
    [("data", flow.data_lane().params()), ("model", flow.model_lane().params())]
}

pub fn format_shape(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
    format!("shape<{}>", dims.join(","))
}

impl ConditionalFlow {
    pub fn to_checkpoint_string(&self) -> String {
        self.to_checkpoint_string_with(&[])
    }

    /// Checkpoint text with extra comment lines after the header. Each
    /// comment must start with `#` and occupy one line.
    pub fn to_checkpoint_string_with(&self, comments: &[String]) -> String {
        let mut out = String::new();
        out.push_str(CHECKPOINT_HEADER);
        out.push('\n');
        for c in comments {
            debug_assert!(c.starts_with('#') && !c.contains('\n'));
            out.push_str(c);
            out.push('\n');
        }
        for (prefix, store) in lanes(self) {
            for (name, t) in store.iter() {
                let _ = writeln!(out, "{prefix}.{name} {}", format_shape(t.shape()));
                for v in t.data() {
                    let _ = writeln!(out, "{v:.16e}");
                }
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.save_with(path, &[])
    }

    pub fn save_with(&self, path: impl AsRef<Path>, comments: &[String]) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint_string_with(comments)).map_err(|e| Error::io(path, e))
    }

    /// Loads parameters into a flow of architecture `arch`. Names and shapes
    /// must match the architecture exactly; nothing is returned on failure.
    pub fn load(path: impl AsRef<Path>, arch: ConditionalArch) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text, arch).map_err(|detail| Error::Checkpoint {
            path: path.to_path_buf(),
            detail,
        })
    }

    pub fn from_checkpoint_str(text: &str, arch: ConditionalArch) -> std::result::Result<Self, String> {
        let mut flow = ConditionalFlow::new(arch, &mut ChaCha8Rng::seed_from_u64(0))
            .map_err(|e| format!("invalid architecture: {e}"))?;
        let mut lines = text.lines().enumerate().peekable();
        match lines.next() {
            Some((_, h)) if h == CHECKPOINT_HEADER => {}
            Some((_, h)) if h.starts_with(MAGIC) => {
                return Err(format!("version mismatch: found `{h}`, expected `{CHECKPOINT_HEADER}`"))
            }
            _ => return Err(format!("malformed file: missing `{CHECKPOINT_HEADER}` header")),
        }

        while lines.next_if(|(_, l)| l.starts_with('#')).is_some() {}

        let mut parsed: Vec<Tensor> = Vec::new();
        let expected: Vec<(String, Vec<usize>)> = lanes(&flow)
            .into_iter()
            .flat_map(|(prefix, store)| {
                store
                    .iter()
                    .map(move |(n, t)| (format!("{prefix}.{n}"), t.shape().to_vec()))
            })
            .collect();
        for (name, shape) in &expected {
            let (lineno, record) = lines
                .next()
                .ok_or_else(|| format!("malformed file: missing record `{name}`"))?;
            let (found_name, found_shape) = parse_record(record)
                .ok_or_else(|| format!("malformed record at line {}: `{record}`", lineno + 1))?;
            if &found_name != name {
                return Err(format!(
                    "parameter mismatch at line {}: found `{found_name}`, expected `{name}`",
                    lineno + 1
                ));
            }
            if &found_shape != shape {
                return Err(format!(
                    "shape mismatch for `{name}`: file has {}, architecture needs {}",
                    format_shape(&found_shape),
                    format_shape(shape)
                ));
            }
            let n: usize = shape.iter().product();
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                let (lineno, line) = lines
                    .next()
                    .ok_or_else(|| format!("malformed file: `{name}` is truncated"))?;
                let v: f64 = line
                    .trim()
                    .parse()
                    .map_err(|_| format!("malformed value at line {}: `{line}`", lineno + 1))?;
                if !v.is_finite() {
                    return Err(format!("non-finite value at line {}", lineno + 1));
                }
                values.push(v);
            }
            parsed.push(Tensor::new(shape.clone(), values).map_err(|e| e.to_string())?);
        }
        if let Some((lineno, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(format!("malformed file: unexpected content at line {}: `{extra}`", lineno + 1));
        }

        let mut it = parsed.into_iter();
        for t in flow.data_lane_mut().params_mut().tensors_mut() {
            *t = it.next().expect("counted above");
        }
        for t in flow.model_lane_mut().params_mut().tensors_mut() {
            *t = it.next().expect("counted above");
        }
        Ok(flow)
    }
}

fn parse_record(line: &str) -> Option<(String, Vec<usize>)> {
    let (name, shape) = line.split_once(' ')?;
    let inner = shape.strip_prefix("shape<")?.strip_suffix('>')?;
    let dims = inner
        .split(',')
        .map(|d| d.parse::<usize>().ok().filter(|&d| d > 0))
        .collect::<Option<Vec<_>>>()?;
    (!name.is_empty()).then(|| (name.to_string(), dims))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> ConditionalArch {
        ConditionalArch {
            blocks: 2,
            hidden: 4,
            ..Default::default()
        }
    }

    fn random_flow() -> ConditionalFlow {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut f = ConditionalFlow::new(small_arch(), &mut rng).unwrap();
        f.data_lane_mut().randomize(0.3, &mut rng);
        f.model_lane_mut().randomize(0.3, &mut rng);
        f
    }

    #[test]
    fn text_round_trip_is_exact() {
        let f = random_flow();
        let text = f.to_checkpoint_string();
        assert!(text.starts_with("mfviflow v1\ndata.b0.c.in.w shape<1,4>\n"));
        let g = ConditionalFlow::from_checkpoint_str(&text, small_arch()).unwrap();
        assert_eq!(g.to_checkpoint_string(), text);
        assert_eq!(g.model_lane().params(), f.model_lane().params());
    }

    #[test]
    fn comments_after_header_are_skipped() {
        let f = random_flow();
        let text = f.to_checkpoint_string_with(&["# run 1".into(), "# hash abc".into()]);
        assert!(text.starts_with("mfviflow v1\n# run 1\n# hash abc\ndata."));
        let g = ConditionalFlow::from_checkpoint_str(&text, small_arch()).unwrap();
        assert_eq!(g.to_checkpoint_string(), f.to_checkpoint_string());
    }

    #[test]
    fn version_mismatch() {
        let text = random_flow().to_checkpoint_string().replacen("v1", "v2", 1);
        let err = ConditionalFlow::from_checkpoint_str(&text, small_arch()).unwrap_err();
        assert!(err.contains("version mismatch"), "{err}");
    }

    #[test]
    fn tampered_shape_header() {
        let text = random_flow()
            .to_checkpoint_string()
            .replacen("data.b0.c.in.w shape<1,4>", "data.b0.c.in.w shape<1,5>", 1);
        let err = ConditionalFlow::from_checkpoint_str(&text, small_arch()).unwrap_err();
        assert!(err.contains("shape mismatch"), "{err}");
    }

    #[test]
    fn malformed_inputs() {
        let good = random_flow().to_checkpoint_string();
        for bad in [
            String::new(),
            "hello\n".to_string(),
            good.replacen("data.b0.c.in.w shape<1,4>", "data.b0.c.in.w shape[1,4]", 1),
            format!("{good}trailing\n"),
            good.lines().take(10).collect::<Vec<_>>().join("\n"),
        ] {
            assert!(ConditionalFlow::from_checkpoint_str(&bad, small_arch()).is_err());
        }
        let wrong_arch = ConditionalArch {
            blocks: 3,
            ..small_arch()
        };
        assert!(ConditionalFlow::from_checkpoint_str(&good, wrong_arch).is_err());
    }
}
