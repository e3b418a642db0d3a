//! Globally adaptive Gauss–Kronrod (7/15) quadrature for scalar and small
//! vector-valued integrands on finite intervals.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
// Gauss weights for the odd-indexed Kronrod nodes 1, 3, 5, 7.
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Debug, Clone, Copy)]
pub struct QuadOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_subdivisions: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        Self {
            abs_tol: 1e-300,
            rel_tol: 1e-10,
            max_subdivisions: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Quadrature<const N: usize> {
    pub value: [f64; N],
    pub error: [f64; N],
    pub subdivisions: usize,
}

struct Segment<const N: usize> {
    a: f64,
    b: f64,
    value: [f64; N],
    error: [f64; N],
    priority: f64,
}

impl<const N: usize> PartialEq for Segment<N> {
    fn eq(&self, other: &Self) -> bool {
        self.priority == other.priority
    }
}
impl<const N: usize> Eq for Segment<N> {}
impl<const N: usize> PartialOrd for Segment<N> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<const N: usize> Ord for Segment<N> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority.total_cmp(&other.priority)
    }
}

fn kronrod<const N: usize, F: FnMut(f64) -> [f64; N]>(f: &mut F, a: f64, b: f64) -> ([f64; N], [f64; N]) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mid = f(center);
    let mut k = [0.0; N];
    let mut g = [0.0; N];
    for j in 0..N {
        k[j] = WGK[7] * mid[j];
        g[j] = WG[3] * mid[j];
    }
    for i in 0..7 {
        let dx = half * XGK[i];
        let lo = f(center - dx);
        let hi = f(center + dx);
        for j in 0..N {
            let s = lo[j] + hi[j];
            k[j] += WGK[i] * s;
            if i % 2 == 1 {
                g[j] += WG[i / 2] * s;
            }
        }
    }
    let mut value = [0.0; N];
    let mut error = [0.0; N];
    for j in 0..N {
        value[j] = k[j] * half;
        error[j] = ((k[j] - g[j]) * half).abs();
    }
    (value, error)
}

/// Integrates a vector-valued function over `[a, b]`. Every component must
/// meet `err <= max(abs_tol, rel_tol * |value|)`.
pub fn integrate_vec<const N: usize, F>(mut f: F, a: f64, b: f64, opts: QuadOptions) -> Result<Quadrature<N>>
where
    F: FnMut(f64) -> [f64; N],
{
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::Input(format!("quadrature bounds must be finite, got [{a}, {b}]")));
    }
    if a == b {
        return Ok(Quadrature {
            value: [0.0; N],
            error: [0.0; N],
            subdivisions: 0,
        });
    }

    let mut heap = BinaryHeap::new();
    let (value, error) = kronrod(&mut f, a, b);
    let mut total = value;
    let mut total_err = error;
    heap.push(Segment {
        a,
        b,
        value,
        error,
        priority: error.iter().fold(0.0, |m: f64, e| m.max(*e)),
    });

    let converged = |total: &[f64; N], err: &[f64; N]| {
        (0..N).all(|j| err[j] <= opts.abs_tol.max(opts.rel_tol * total[j].abs()))
    };

    let mut subdivisions = 0;
    while !converged(&total, &total_err) {
        if subdivisions >= opts.max_subdivisions {
            let worst = (0..N)
                .max_by(|&i, &j| total_err[i].total_cmp(&total_err[j]))
                .unwrap_or(0);
            return Err(Error::Quadrature {
                estimate: total[worst],
                error: total_err[worst],
                subdivisions,
            });
        }
        let Some(seg) = heap.pop() else { break };
        let mid = 0.5 * (seg.a + seg.b);
        if mid <= seg.a || mid >= seg.b {
            // Interval cannot be split further in floating point.
            heap.push(Segment { priority: 0.0, ..seg });
            subdivisions = opts.max_subdivisions;
            continue;
        }
        let (lv, le) = kronrod(&mut f, seg.a, mid);
        let (rv, re) = kronrod(&mut f, mid, seg.b);
        for j in 0..N {
            total[j] += lv[j] + rv[j] - seg.value[j];
            total_err[j] += le[j] + re[j] - seg.error[j];
        }
        // Rescale priorities per component so a large component does not
        // starve a small one that is further from its own tolerance.
        let scale: [f64; N] = std::array::from_fn(|j| opts.abs_tol.max(opts.rel_tol * total[j].abs()));
        let prio = |e: &[f64; N]| (0..N).fold(0.0, |m: f64, j| m.max(e[j] / scale[j]));
        heap.push(Segment {
            a: seg.a,
            b: mid,
            value: lv,
            error: le,
            priority: prio(&le),
        });
        heap.push(Segment {
            a: mid,
            b: seg.b,
            value: rv,
            error: re,
            priority: prio(&re),
        });
        subdivisions += 1;
    }

    // Re-sum to shed the drift of incremental updates.
    let mut value = [0.0; N];
    let mut error = [0.0; N];
    for seg in heap.iter() {
        for j in 0..N {
            value[j] += seg.value[j];
            error[j] += seg.error[j];
        }
    }
    Ok(Quadrature {
        value,
        error,
        subdivisions,
    })
}

/// Scalar convenience wrapper around [`integrate_vec`].
pub fn integrate<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, opts: QuadOptions) -> Result<Quadrature<1>> {
    integrate_vec(|x| [f(x)], a, b, opts)
}
