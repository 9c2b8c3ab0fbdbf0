//! Numpy-style broadcasting of two operands against an output shape.

use super::{numel, strides};

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` right-aligned inside `out`, zero on broadcast axes.
fn expanded_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Index pairing between an output and two (possibly broadcast) inputs.
pub(crate) enum Pairing {
    Same(usize),
    /// `b` is a trailing block of `a`, which has the output shape.
    SuffixB { n: usize, nb: usize },
    SuffixA { n: usize, na: usize },
    General {
        out: Vec<usize>,
        sa: Vec<usize>,
        sb: Vec<usize>,
    },
}

impl Pairing {
    pub(crate) fn new(a: &[usize], b: &[usize], out: &[usize]) -> Pairing {
        let n = numel(out);
        if a == b {
            Pairing::Same(n)
        } else if a == out && out.ends_with(b) {
            Pairing::SuffixB { n, nb: numel(b) }
        } else if b == out && out.ends_with(a) {
            Pairing::SuffixA { n, na: numel(a) }
        } else {
            Pairing::General {
                out: out.to_vec(),
                sa: expanded_strides(a, out),
                sb: expanded_strides(b, out),
            }
        }
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element in order.
    pub(crate) fn visit(&self, mut f: impl FnMut(usize, usize, usize)) {
        match self {
            Pairing::Same(n) => (0..*n).for_each(|o| f(o, o, o)),
            Pairing::SuffixB { n, nb } => (0..*n).for_each(|o| f(o, o, o % nb)),
            Pairing::SuffixA { n, na } => (0..*n).for_each(|o| f(o, o % na, o)),
            Pairing::General { out, sa, sb } => {
                let rank = out.len();
                let total = numel(out);
                let mut idx = vec![0usize; rank];
                let (mut ia, mut ib) = (0usize, 0usize);
                for o in 0..total {
                    f(o, ia, ib);
                    let mut ax = rank;
                    while ax > 0 {
                        ax -= 1;
                        idx[ax] += 1;
                        ia += sa[ax];
                        ib += sb[ax];
                        if idx[ax] < out[ax] {
                            break;
                        }
                        ia -= sa[ax] * out[ax];
                        ib -= sb[ax] * out[ax];
                        idx[ax] = 0;
                    }
                }
            }
        }
    }
}
