//! Adaptive Gauss–Kronrod (7, 15) integration on finite intervals.

use std::collections::BinaryHeap;

// Kronrod abscissae on [0, 1] (symmetric), from the QUADPACK qk15 table.
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
// Gauss weights for the odd-indexed Kronrod nodes (XGK[1], [3], [5], [7]).
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// One G7/K15 panel: (Kronrod estimate, |K15 − G7|, ∫|f| estimate).
fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    let mut abs = WGK[7] * fc.abs();
    for j in 0..7 {
        let dx = h * XGK[j];
        let f1 = f(c - dx);
        let f2 = f(c + dx);
        kronrod += WGK[j] * (f1 + f2);
        abs += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            gauss += WG[j / 2] * (f1 + f2);
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs(), abs * h.abs())
}

/// Integrates `f` over `[a, b]`, first splitting into `panels` equal pieces,
/// then bisecting the worst piece until the summed error estimate is below
/// `rel_tol · ∫|f|` (or `abs_tol`). Returns `None` once `max_panels` panels
/// are exhausted.
pub(crate) fn integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    panels: usize,
    rel_tol: f64,
    abs_tol: f64,
    max_panels: usize,
) -> Option<f64> {
    let panels = panels.max(1);
    let w = (b - a) / panels as f64;
    let mut heap = BinaryHeap::with_capacity(panels * 2);
    for i in 0..panels {
        let lo = a + w * i as f64;
        let hi = if i + 1 == panels { b } else { lo + w };
        heap.push(Piece::new(&f, lo, hi));
    }
    loop {
        // Re-summing keeps rounding from accumulating over many bisections.
        let (mut value, mut error, mut mass) = (0.0, 0.0, 0.0);
        for p in heap.iter() {
            value += p.value;
            error += p.error;
            mass += p.mass;
        }
        if error <= (rel_tol * mass).max(abs_tol) {
            return Some(value);
        }
        if heap.len() >= max_panels {
            return None;
        }
        // Bisect a batch of the worst panels before re-checking.
        let batch = (heap.len() / 8).max(1);
        for _ in 0..batch {
            let Some(p) = heap.pop() else { break };
            let mid = 0.5 * (p.lo + p.hi);
            heap.push(Piece::new(&f, p.lo, mid));
            heap.push(Piece::new(&f, mid, p.hi));
        }
    }
}

struct Piece {
    lo: f64,
    hi: f64,
    value: f64,
    error: f64,
    mass: f64,
}

impl Piece {
    fn new<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64) -> Self {
        let (value, error, mass) = gk15(f, lo, hi);
        Piece { lo, hi, value, error, mass }
    }
}

impl PartialEq for Piece {
    fn eq(&self, other: &Self) -> bool {
        self.error.total_cmp(&other.error).is_eq()
    }
}
impl Eq for Piece {}
impl PartialOrd for Piece {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Piece {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.error.total_cmp(&other.error)
    }
}
