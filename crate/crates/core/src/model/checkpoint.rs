//! Text serialization of parameters.
//!
//! ```text
//! CLSDCKPT v1
//! backbone deepfm dim 8 cards 2000,1000,6,16,4 groups 6 mlp 32,16 adgate 8
//! embeddings
//! <values>
//! first_order
//! <values>
//! ...
//! ```
//!
//! Every section is a name line followed by one line of whitespace-separated
//! values printed with 17 significant digits, which round-trips exactly.
//! Sections that do not describe parameters are handed back to the caller.

use std::fmt::Write as _;

use super::{Backbone, Layout, ModelParams, ModelSpec};
use crate::error::{Error, Result};

pub const CHECKPOINT_HEADER: &str = "CLSDCKPT v1";

pub(crate) fn format_values(values: &[f64]) -> String {
    let mut out = String::with_capacity(values.len() * 24);
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v:.16e}");
    }
    out
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Header, spec line and all parameter sections.
pub fn write_params(params: &ModelParams, out: &mut String) {
    let spec = params.spec();
    out.push_str(CHECKPOINT_HEADER);
    out.push('\n');
    let _ = writeln!(
        out,
        "backbone {} dim {} cards {} groups {} mlp {} adgate {}",
        spec.backbone,
        spec.dim,
        join(&spec.cardinalities),
        spec.groups,
        if spec.mlp_hidden.is_empty() {
            "-".to_string()
        } else {
            join(&spec.mlp_hidden)
        },
        spec.adgate_hidden
    );
    for (name, range) in params.layout().sections() {
        let _ = writeln!(out, "{name}\n{}", format_values(&params.values()[range]));
    }
}

/// Parses a checkpoint. Returns the parameters and every non-parameter
/// section as `(name, raw value line)` in file order.
pub fn parse_params(text: &str) -> Result<(ModelParams, Vec<(String, String)>)> {
    if !text.ends_with('\n') {
        return Err(Error::Checkpoint("file is truncated".into()));
    }
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CHECKPOINT_HEADER => {}
        Some(h) if h.starts_with("CLSDCKPT") => {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version `{h}`")))
        }
        _ => return Err(Error::Checkpoint("not a checkpoint file".into())),
    }
    let spec = parse_spec(
        lines
            .next()
            .ok_or_else(|| Error::Checkpoint("missing spec line".into()))?,
    )?;
    let mut layout = Layout::new(spec)?;
    let mut sections: Vec<(String, Vec<f64>)> = Vec::new();
    let mut extras = Vec::new();
    while let Some(name) = lines.next() {
        if name.is_empty() {
            continue;
        }
        let values = lines
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("section `{name}` has no values")))?;
        if is_param_section(name) {
            let parsed = values
                .split_whitespace()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| Error::Checkpoint(format!("section `{name}`: `{v}`: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            sections.push((name.to_string(), parsed));
        } else {
            extras.push((name.to_string(), values.to_string()));
        }
    }

    // Heads are allocated in the order their sections appear.
    for (name, _) in &sections {
        if name == "aux.w" && layout.aux.is_none() {
            layout.push_aux();
        } else if name == "adgate.0.w" && layout.adgate.is_none() {
            layout.push_adgate();
        }
    }
    let expected = layout.sections();
    if expected.len() != sections.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter sections, found {}",
            expected.len(),
            sections.len()
        )));
    }
    let mut values = Vec::with_capacity(layout.len());
    for ((want, range), (got, vals)) in expected.iter().zip(&sections) {
        if want != got {
            return Err(Error::Checkpoint(format!("expected section `{want}`, found `{got}`")));
        }
        if vals.len() != range.len() {
            return Err(Error::Checkpoint(format!(
                "section `{got}` has {} values, expected {}",
                vals.len(),
                range.len()
            )));
        }
        values.extend_from_slice(vals);
    }
    Ok((ModelParams::from_parts(layout, values), extras))
}

fn is_param_section(name: &str) -> bool {
    matches!(name, "embeddings" | "first_order" | "bias")
        || name.starts_with("mlp.")
        || name.starts_with("aux.")
        || name.starts_with("adgate.")
}

fn parse_spec(line: &str) -> Result<ModelSpec> {
    let bad = || Error::Checkpoint(format!("malformed spec line `{line}`"));
    let tok: Vec<&str> = line.split_whitespace().collect();
    if tok.len() != 12 {
        return Err(bad());
    }
    let keys = ["backbone", "dim", "cards", "groups", "mlp", "adgate"];
    for (i, key) in keys.iter().enumerate() {
        if tok[2 * i] != *key {
            return Err(bad());
        }
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
    let list = |s: &str| -> Result<Vec<usize>> {
        if s == "-" {
            Ok(vec![])
        } else {
            s.split(',').map(num).collect()
        }
    };
    Ok(ModelSpec {
        backbone: tok[1].parse::<Backbone>()?,
        dim: num(tok[3])?,
        cardinalities: list(tok[5])?.into_iter().map(|c| c as u32).collect(),
        groups: num(tok[7])?,
        mlp_hidden: list(tok[9])?,
        adgate_hidden: num(tok[11])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::small_spec;

    fn text(p: &ModelParams) -> String {
        let mut s = String::new();
        write_params(p, &mut s);
        s
    }

    #[test]
    fn round_trip_is_exact() {
        for b in Backbone::ALL {
            let mut p = ModelParams::init(small_spec(b), 17).unwrap();
            p.values_mut()[0] = 1.0 / 3.0;
            p.values_mut()[1] = -0.0;
            p.enable_aux(1);
            p.enable_adgate(2);
            let s = text(&p);
            let (back, extras) = parse_params(&s).unwrap();
            assert!(extras.is_empty());
            assert_eq!(back.layout(), p.layout());
            let bits = |q: &ModelParams| q.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&back), bits(&p));
            assert_eq!(text(&back), s);
        }
    }

    #[test]
    fn truncated_is_error() {
        let p = ModelParams::init(small_spec(Backbone::DeepFm), 1).unwrap();
        let s = text(&p);
        for cut in [10, s.len() / 2, s.len() - 30, s.len() - 3, s.len() - 1] {
            assert!(parse_params(&s[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn version_mismatch_refused() {
        let p = ModelParams::init(small_spec(Backbone::Lr), 1).unwrap();
        let s = text(&p).replacen("CLSDCKPT v1", "CLSDCKPT v2", 1);
        let err = parse_params(&s).unwrap_err();
        assert!(err.to_string().contains("version"));
    }
}
