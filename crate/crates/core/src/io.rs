//! Text format for layered MDPs.
//!
//! A document is a sequence of directives, one per line; `#` starts a comment.
//!
//! ```text
//! horizon 2
//! actions 2
//! feature_dim 8
//! layers 2 2
//! init 0.5 0.5
//! transition 1 0 0   0.3 0.7
//! reward 1 0 0   0.25
//! feature 1 0 0   1 0 0 0 0 0 0 0
//! ```
//!
//! Layers are 1-based, states and actions 0-based. Every `(h, x, a)` needs a
//! `reward` and `feature` line, and a `transition` line for `h < H`. The
//! loader reports the offending line for every violation it can attribute.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::mdp::LayeredMdp;

struct LineCtx<'a> {
    path: &'a str,
    line: usize,
}

impl LineCtx<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_string(),
            line: self.line,
            msg: msg.into(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(ctx: &LineCtx, tok: &str, what: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| ctx.err(format!("cannot parse {what} from {tok:?}")))
}

pub fn parse_mdp(text: &str, path: &str) -> Result<LayeredMdp> {
    let mut horizon: Option<usize> = None;
    let mut actions: Option<usize> = None;
    let mut feature_dim: Option<usize> = None;
    let mut layers: Option<Vec<usize>> = None;
    let mut init: Option<(Vec<f64>, usize)> = None;
    // (value, line) per (h, x, a), filled as we go.
    let mut transitions: Vec<Vec<Vec<Option<(Vec<f64>, usize)>>>> = Vec::new();
    let mut rewards: Vec<Vec<Vec<Option<(f64, usize)>>>> = Vec::new();
    let mut features: Vec<Vec<Vec<Option<(Vec<f64>, usize)>>>> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let ctx = LineCtx {
            path,
            line: idx + 1,
        };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        let key = toks.next().unwrap();
        let rest: Vec<&str> = toks.collect();
        match key {
            "horizon" => {
                if rest.len() != 1 {
                    return Err(ctx.err("horizon takes one value"));
                }
                horizon = Some(parse_num(&ctx, rest[0], "horizon")?);
            }
            "actions" => {
                if rest.len() != 1 {
                    return Err(ctx.err("actions takes one value"));
                }
                actions = Some(parse_num(&ctx, rest[0], "action count")?);
            }
            "feature_dim" => {
                if rest.len() != 1 {
                    return Err(ctx.err("feature_dim takes one value"));
                }
                feature_dim = Some(parse_num(&ctx, rest[0], "feature dimension")?);
            }
            "layers" => {
                let sizes: Vec<usize> = rest
                    .iter()
                    .map(|t| parse_num(&ctx, t, "layer size"))
                    .collect::<Result<_>>()?;
                let h = horizon.ok_or_else(|| ctx.err("horizon must come before layers"))?;
                if sizes.len() != h {
                    return Err(ctx.err(format!("expected {h} layer sizes, got {}", sizes.len())));
                }
                if sizes.iter().any(|&n| n == 0) {
                    return Err(ctx.err("layer sizes must be positive"));
                }
                let a = actions.ok_or_else(|| ctx.err("actions must come before layers"))?;
                transitions = (0..h.saturating_sub(1))
                    .map(|hi| vec![vec![None; a]; sizes[hi]])
                    .collect();
                rewards = (0..h).map(|hi| vec![vec![None; a]; sizes[hi]]).collect();
                features = (0..h).map(|hi| vec![vec![None; a]; sizes[hi]]).collect();
                layers = Some(sizes);
            }
            "init" => {
                let probs: Vec<f64> = rest
                    .iter()
                    .map(|t| parse_num(&ctx, t, "probability"))
                    .collect::<Result<_>>()?;
                init = Some((probs, ctx.line));
            }
            "transition" | "reward" | "feature" => {
                let sizes = layers
                    .as_ref()
                    .ok_or_else(|| ctx.err("layers must come before tables"))?;
                if rest.len() < 3 {
                    return Err(ctx.err(format!("{key} needs layer, state, action and values")));
                }
                let h: usize = parse_num(&ctx, rest[0], "layer")?;
                let x: usize = parse_num(&ctx, rest[1], "state")?;
                let a: usize = parse_num(&ctx, rest[2], "action")?;
                if h < 1 || h > sizes.len() {
                    return Err(ctx.err(format!("layer {h} outside 1..={}", sizes.len())));
                }
                if x >= sizes[h - 1] {
                    return Err(ctx.err(format!(
                        "state {x} outside layer {h} (size {})",
                        sizes[h - 1]
                    )));
                }
                if a >= actions.unwrap() {
                    return Err(ctx.err(format!("action {a} outside 0..{}", actions.unwrap())));
                }
                let vals: Vec<f64> = rest[3..]
                    .iter()
                    .map(|t| parse_num(&ctx, t, "value"))
                    .collect::<Result<_>>()?;
                match key {
                    "transition" => {
                        if h == sizes.len() {
                            return Err(ctx.err("no transition rows at the final layer"));
                        }
                        if vals.len() != sizes[h] {
                            return Err(ctx.err(format!(
                                "transition row has {} entries, layer {} has {} states",
                                vals.len(),
                                h + 1,
                                sizes[h]
                            )));
                        }
                        if vals.iter().any(|&p| p < 0.0) {
                            return Err(ctx.err("negative transition probability"));
                        }
                        let sum: f64 = vals.iter().sum();
                        if (sum - 1.0).abs() > crate::mdp::STOCHASTIC_TOL {
                            return Err(ctx.err(format!("transition row sums to {sum}")));
                        }
                        let slot = &mut transitions[h - 1][x][a];
                        if slot.is_some() {
                            return Err(ctx.err(format!("duplicate transition ({h}, {x}, {a})")));
                        }
                        *slot = Some((vals, ctx.line));
                    }
                    "reward" => {
                        if vals.len() != 1 {
                            return Err(ctx.err("reward takes one value"));
                        }
                        if !(0.0..=1.0).contains(&vals[0]) {
                            return Err(ctx.err(format!("reward {} outside [0, 1]", vals[0])));
                        }
                        let slot = &mut rewards[h - 1][x][a];
                        if slot.is_some() {
                            return Err(ctx.err(format!("duplicate reward ({h}, {x}, {a})")));
                        }
                        *slot = Some((vals[0], ctx.line));
                    }
                    _ => {
                        let dim = feature_dim
                            .ok_or_else(|| ctx.err("feature_dim must come before features"))?;
                        if vals.len() != dim {
                            return Err(ctx.err(format!(
                                "feature has {} entries, expected {dim}",
                                vals.len()
                            )));
                        }
                        let norm = vals.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm > 1.0 + crate::mdp::FEATURE_NORM_TOL {
                            return Err(ctx.err(format!("feature norm {norm} exceeds 1")));
                        }
                        let slot = &mut features[h - 1][x][a];
                        if slot.is_some() {
                            return Err(ctx.err(format!("duplicate feature ({h}, {x}, {a})")));
                        }
                        *slot = Some((vals, ctx.line));
                    }
                }
            }
            other => {
                return Err(ctx.err(format!("unknown directive {other:?}")));
            }
        }
    }

    let eof = LineCtx {
        path,
        line: text.lines().count() + 1,
    };
    let horizon = horizon.ok_or_else(|| eof.err("missing horizon"))?;
    let actions = actions.ok_or_else(|| eof.err("missing actions"))?;
    let feature_dim = feature_dim.ok_or_else(|| eof.err("missing feature_dim"))?;
    let layers = layers.ok_or_else(|| eof.err("missing layers"))?;
    let (init, init_line) = init.ok_or_else(|| eof.err("missing init"))?;
    let init_ctx = LineCtx {
        path,
        line: init_line,
    };
    if init.len() != layers[0] {
        return Err(init_ctx.err(format!(
            "init has {} entries, layer 1 has {} states",
            init.len(),
            layers[0]
        )));
    }

    let mut t_out = Vec::new();
    for (hi, layer) in transitions.into_iter().enumerate() {
        let mut l_out = Vec::new();
        for (x, row) in layer.into_iter().enumerate() {
            let mut r_out = Vec::new();
            for (a, slot) in row.into_iter().enumerate() {
                let (vals, _) = slot.ok_or_else(|| {
                    eof.err(format!("missing transition ({}, {x}, {a})", hi + 1))
                })?;
                r_out.push(vals);
            }
            l_out.push(r_out);
        }
        t_out.push(l_out);
    }
    let mut r_tables = Vec::new();
    for (hi, layer) in rewards.into_iter().enumerate() {
        let mut l_out = Vec::new();
        for (x, row) in layer.into_iter().enumerate() {
            let mut r_out = Vec::new();
            for (a, slot) in row.into_iter().enumerate() {
                let (v, _) =
                    slot.ok_or_else(|| eof.err(format!("missing reward ({}, {x}, {a})", hi + 1)))?;
                r_out.push(v);
            }
            l_out.push(r_out);
        }
        r_tables.push(l_out);
    }
    let mut f_tables = Vec::new();
    for (hi, layer) in features.into_iter().enumerate() {
        let mut l_out = Vec::new();
        for (x, row) in layer.into_iter().enumerate() {
            let mut r_out = Vec::new();
            for (a, slot) in row.into_iter().enumerate() {
                let (vals, _) = slot
                    .ok_or_else(|| eof.err(format!("missing feature ({}, {x}, {a})", hi + 1)))?;
                r_out.push(DVector::from_vec(vals));
            }
            l_out.push(r_out);
        }
        f_tables.push(l_out);
    }

    LayeredMdp::new(
        horizon,
        layers,
        actions,
        feature_dim,
        init,
        t_out,
        r_tables,
        f_tables,
    )
}

pub fn load_mdp(path: impl AsRef<Path>) -> Result<LayeredMdp> {
    let p = path.as_ref();
    let text = std::fs::read_to_string(p)?;
    parse_mdp(&text, &p.display().to_string())
}

pub fn to_text(mdp: &LayeredMdp) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "horizon {}", mdp.horizon());
    let _ = writeln!(s, "actions {}", mdp.num_actions());
    let _ = writeln!(s, "feature_dim {}", mdp.feature_dim());
    let sizes: Vec<String> = mdp.layer_sizes().iter().map(|n| n.to_string()).collect();
    let _ = writeln!(s, "layers {}", sizes.join(" "));
    let init: Vec<String> = mdp.init_dist().iter().map(fmt_f64).collect();
    let _ = writeln!(s, "init {}", init.join(" "));
    for h in 1..=mdp.horizon() {
        for x in 0..mdp.layer_size(h) {
            for a in 0..mdp.num_actions() {
                if h < mdp.horizon() {
                    let row: Vec<String> = mdp.transition(h, x, a).iter().map(fmt_f64).collect();
                    let _ = writeln!(s, "transition {h} {x} {a} {}", row.join(" "));
                }
                let _ = writeln!(s, "reward {h} {x} {a} {}", fmt_f64(&mdp.reward(h, x, a)));
                let phi: Vec<String> = mdp.feature(h, x, a).iter().map(fmt_f64).collect();
                let _ = writeln!(s, "feature {h} {x} {a} {}", phi.join(" "));
            }
        }
    }
    s
}

fn fmt_f64(v: &f64) -> String {
    // Shortest representation that round-trips.
    let mut buf = ryu_like(*v);
    if !buf.contains('.') && !buf.contains('e') && !buf.contains("inf") && !buf.contains("NaN") {
        buf.push_str(".0");
    }
    buf
}

fn ryu_like(v: f64) -> String {
    // `{:?}` on f64 prints the shortest round-tripping decimal.
    format!("{v:?}")
}

pub fn save_mdp(mdp: &LayeredMdp, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_text(mdp))?;
    Ok(())
}
