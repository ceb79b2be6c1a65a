use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use rand_distr::{Distribution, StandardNormal};

const EXTRACTOR_WIDTHS: [usize; 5] = [3, 8, 16, 32, 32];

/// Fixed feature pyramid for the perceptual loss: four stride-2 3×3
/// convolutions with ReLU, randomly initialized from a recorded seed and
/// never trained.
#[derive(Debug, Clone, PartialEq)]
pub struct Extractor {
    pub seed: u64,
    stages: Vec<(Tensor, Tensor)>,
}

impl Extractor {
    pub fn random(seed: u64) -> Self {
        let mut r = rng::stream(seed, &[rng::tag::EXTRACTOR]);
        let stages = EXTRACTOR_WIDTHS
            .windows(2)
            .map(|io| {
                let (cin, cout) = (io[0], io[1]);
                let std = (2.0 / (9 * cin) as f64).sqrt();
                let w = (0..cout * cin * 9)
                    .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r))
                    .collect();
                (Tensor::new([cout, cin, 3, 3], w), Tensor::zeros([cout]))
            })
            .collect();
        Self { seed, stages }
    }

    /// Use caller-provided stages, e.g. pretrained weights. Each stage is a
    /// `[C_out, C_in, 3, 3]` weight and `[C_out]` bias applied with stride 2.
    pub fn from_stages(stages: Vec<(Tensor, Tensor)>) -> Self {
        Self { seed: 0, stages }
    }

    /// Feature maps after every stage of an image `[3, H, W]`.
    pub fn features(&self, tape: &mut Tape, image: Var) -> Vec<Var> {
        let mut x = image;
        let mut out = Vec::with_capacity(self.stages.len());
        for (w, b) in &self.stages {
            let (w, b) = (tape.constant(w.clone()), tape.constant(b.clone()));
            let y = tape.conv2d(x, w, Some(b), 2);
            x = tape.relu(y);
            out.push(x);
        }
        out
    }
}

/// `Σ_s mean |ψ_s(pred) − ψ_s(ref)|` over the extractor's scales.
pub fn perceptual_loss(tape: &mut Tape, pred: Var, reference: Var, extractor: &Extractor) -> Var {
    let fp = extractor.features(tape, pred);
    let fr = extractor.features(tape, reference);
    let terms: Vec<Var> = fp
        .into_iter()
        .zip(fr)
        .map(|(a, b)| {
            let d = tape.sub(a, b);
            let d = tape.abs(d);
            tape.mean(d)
        })
        .collect();
    tape.add_n(&terms)
}

/// Mean squared difference between an edge map and a binary mask.
pub fn mask_loss(tape: &mut Tape, edge_map: Var, mask: &Tensor) -> Result<Var> {
    if tape.value(edge_map).len() != mask.len() {
        return Err(Error::ShapeMismatch {
            entry: "mask".into(),
            expected: tape.shape(edge_map).to_vec(),
            found: mask.shape().to_vec(),
        });
    }
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::invalid("mask", "entries must be exactly 0 or 1"));
    }
    let m = tape.constant(mask.clone().reshape(tape.shape(edge_map).to_vec()));
    let d = tape.sub(edge_map, m);
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// `(1/K) Σ_k (λ_vgg·L_vgg^k + λ_mask·L_mask^k)` over `(vgg, mask)` pairs.
pub fn total_loss(tape: &mut Tape, per_view: &[(Var, Var)], lambda_vgg: f64, lambda_mask: f64) -> Var {
    assert!(!per_view.is_empty(), "total loss over no views");
    let terms: Vec<Var> = per_view
        .iter()
        .flat_map(|&(v, m)| [v, m])
        .collect();
    let weighted: Vec<Var> = terms
        .iter()
        .enumerate()
        .map(|(i, &t)| tape.scale(t, if i % 2 == 0 { lambda_vgg } else { lambda_mask }))
        .collect();
    let s = tape.add_n(&weighted);
    tape.scale(s, 1.0 / per_view.len() as f64)
}
