//! Optimal welfare as a function of one player's bid.
//!
//! With the other weights fixed, `OPT(t) = max_pi (t * u[i][pi(i)] + rest(pi))`
//! is the upper envelope of at most `n` lines (one per distinct slope), so it
//! is convex and piecewise linear. On each piece the optimal assignment gives
//! player `i` utility `slope` and charges the VCG payment
//! `OPT_{-i} - intercept`.

use serde::{Deserialize, Serialize};

use super::{check_len, lex_optimum, optimum, resolve_weights, UtilityMatrix};
use crate::error::{ApexError, Result};

/// One linear piece of the welfare envelope on `[start, end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopePiece {
    pub start: f64,
    pub end: f64,
    /// Player's raw utility `u[i][pi(i)]` on this piece.
    pub slope: f64,
    /// Welfare of the other players on this piece.
    pub intercept: f64,
    /// Lexicographically smallest optimal assignment at the midpoint.
    pub pi: Vec<usize>,
}

#[derive(Clone, Copy)]
struct Line {
    slope: f64,
    intercept: f64,
}

impl Line {
    fn at(&self, t: f64) -> f64 {
        self.slope * t + self.intercept
    }
}

struct Ctx<'a> {
    u: &'a UtilityMatrix,
    w: Vec<f64>,
    player: usize,
    tol: f64,
}

impl Ctx<'_> {
    fn weighted_at(&self, t: f64) -> Vec<f64> {
        let n = self.u.n();
        let mut w = self.w.clone();
        for (k, v) in self.u.row(self.player).iter().enumerate() {
            w[self.player * n + k] = t * v;
        }
        w
    }

    fn supporting_line(&self, t: f64) -> (f64, Line) {
        let n = self.u.n();
        let w = self.weighted_at(t);
        let (value, pi) = optimum(&w, n);
        let slope = self.u.get(self.player, pi[self.player]);
        let intercept = (0..n)
            .filter(|&k| k != self.player)
            .map(|k| w[k * n + pi[k]])
            .sum();
        (value, Line { slope, intercept })
    }

    fn refine(&self, l: f64, left: Line, r: f64, right: Line, out: &mut Vec<(f64, f64, Line)>) {
        if (left.slope - right.slope).abs() <= self.tol || r - l <= 0.0 {
            let line = if left.intercept >= right.intercept {
                left
            } else {
                right
            };
            out.push((l, r, line));
            return;
        }
        let cross = ((right.intercept - left.intercept) / (left.slope - right.slope)).clamp(l, r);
        let (value, mid) = self.supporting_line(cross);
        if value <= left.at(cross).max(right.at(cross)) + self.tol {
            out.push((l, cross, left));
            out.push((cross, r, right));
        } else {
            self.refine(l, left, cross, mid, out);
            self.refine(cross, mid, r, right, out);
        }
    }
}

/// Pieces of `t -> OPT` for player `player`'s weight `t` in `[lo, hi]`,
/// with the other players weighted by `weights` (entry `player` ignored).
///
/// Pieces are ordered, contiguous, have strictly increasing slopes and
/// positive length (unless `lo == hi`).
pub fn bid_envelope(
    u: &UtilityMatrix,
    weights: &[f64],
    player: usize,
    lo: f64,
    hi: f64,
) -> Result<Vec<EnvelopePiece>> {
    let n = u.n();
    check_len("weights", n, weights.len())?;
    if player >= n {
        return Err(ApexError::OutOfRange {
            what: "player",
            index: player,
            len: n,
        });
    }
    if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
        return Err(ApexError::InvalidParameter(format!(
            "bid interval [{lo}, {hi}] must be finite and non-negative"
        )));
    }
    let mut lambda = weights.to_vec();
    lambda[player] = 0.0;
    let lambda = resolve_weights(n, Some(&lambda))?;
    let w = u.weighted(&lambda);
    let scale = w
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(hi * u.max_entry());
    let ctx = Ctx {
        u,
        w,
        player,
        tol: 1e-12 * (1.0 + n as f64 * scale),
    };

    let (_, left) = ctx.supporting_line(lo);
    let (_, right) = ctx.supporting_line(hi);
    let mut raw = Vec::new();
    ctx.refine(lo, left, hi, right, &mut raw);

    // Merge neighbours on the same line and drop empty pieces.
    let mut merged: Vec<(f64, f64, Line)> = Vec::new();
    for (s, e, line) in raw {
        if e <= s && !(lo == hi && merged.is_empty()) {
            continue;
        }
        match merged.last_mut() {
            Some(last) if (last.2.slope - line.slope).abs() <= ctx.tol => {
                last.1 = e;
                if line.intercept > last.2.intercept {
                    last.2 = line;
                }
            }
            _ => merged.push((s, e, line)),
        }
    }
    if merged.is_empty() {
        merged.push((lo, hi, left));
    }
    Ok(merged
        .into_iter()
        .map(|(start, end, line)| {
            let mid = 0.5 * (start + end);
            let (pi, _, _, _) = lex_optimum(&ctx.weighted_at(mid), n);
            EnvelopePiece {
                start,
                end,
                slope: line.slope,
                intercept: line.intercept,
                pi,
            }
        })
        .collect())
}
