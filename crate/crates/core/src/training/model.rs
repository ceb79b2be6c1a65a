use super::losses::{mask_loss, perceptual_loss, total_loss, Extractor};
use super::params::{Group, ParamStore};
use super::TrainConfig;
use crate::autodiff::{Tape, Var};
use crate::backbone::MultiViewSample;
use crate::error::{Error, Result};
use crate::geometry::project_points_on_tape;
use crate::keypoints::{integral_regression, volume_net};
use crate::lifting::{aggregate_features, attention_fuse, keypoint_head, unproject, SamplingTable, VoxelGrid};
use crate::rng;
use crate::structure::{adjacency_weights, render_edge_map};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Input geometry a model is built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub layer_channels: Vec<usize>,
    /// `[H, W]`
    pub image_size: [usize; 2],
}

impl ModelShape {
    pub fn of(sample: &MultiViewSample) -> Result<Self> {
        let (h, w) = sample.image_size();
        Ok(Self {
            layer_channels: sample.features()?.iter().map(|f| f.dim(0)).collect(),
            image_size: [h, w],
        })
    }

    pub fn check(&self, sample: &MultiViewSample) -> Result<()> {
        let other = Self::of(sample)?;
        if &other != self {
            return Err(Error::Config(format!(
                "model expects {} px images with feature channels {:?}; sample has {} px with {:?}",
                fmt_size(self.image_size),
                self.layer_channels,
                fmt_size(other.image_size),
                other.layer_channels
            )));
        }
        Ok(())
    }
}

fn fmt_size(s: [usize; 2]) -> String {
    format!("{}×{}", s[0], s[1])
}

#[derive(Debug, Clone, PartialEq)]
struct Indices {
    layer_weights: usize,
    bottlenecks: Vec<usize>,
    head: [usize; 4],
    volume: Vec<(usize, usize)>,
    adjacency: usize,
    encoder: Vec<(usize, usize)>,
    decoder: Vec<(usize, usize)>,
    to_rgb: (usize, usize),
}

/// All trainable components and their parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub shape: ModelShape,
    pub store: ParamStore,
    idx: Indices,
}

/// Values of one per-view loss computation.
pub struct ViewTerms {
    pub edge_map: Var,
    pub reconstruction: Var,
    pub vgg: Var,
    pub mask: Var,
}

pub struct LossForward {
    pub keypoints: Var,
    pub views: Vec<ViewTerms>,
    pub total: Var,
}

fn normal(r: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| std * r.sample::<f64, _>(StandardNormal)).collect())
}

impl Model {
    pub fn new(config: &TrainConfig, shape: ModelShape) -> Result<Self> {
        config.validate()?;
        let [h, w] = shape.image_size;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!("image size {h}×{w} must be divisible by 4")));
        }
        if shape.layer_channels.is_empty() {
            return Err(Error::Config("model needs at least one feature layer".into()));
        }
        let mut r = rng::stream(config.seed, &[rng::tag::INIT]);
        let mut store = ParamStore::default();
        let (cp, n, rw) = (config.feature_width, config.keypoints, config.recon_width);
        let l = shape.layer_channels.len();
        let layer_weights = store.add("aggregator/layer_weights", Tensor::full([l], 1.0 / l as f64), Group::Main);
        let bottlenecks = shape
            .layer_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let t = normal(&mut r, &[cp, c], (1.0 / c as f64).sqrt());
                store.add(format!("aggregator/bottleneck{i}"), t, Group::Main)
            })
            .collect();
        let head = [
            store.add("head/w1", normal(&mut r, &[cp, cp], (2.0 / cp as f64).sqrt()), Group::Main),
            store.add("head/b1", Tensor::zeros([cp]), Group::Main),
            store.add("head/w2", normal(&mut r, &[n, cp], (1.0 / cp as f64).sqrt()), Group::Main),
            store.add("head/b2", Tensor::zeros([n]), Group::Main),
        ];
        let widths = [n, 2 * n, 2 * n, n];
        let volume = widths
            .windows(2)
            .enumerate()
            .map(|(i, io)| {
                let (cin, cout) = (io[0], io[1]);
                let gain = if i + 2 == widths.len() { 1.0 } else { 2.0 };
                let wt = normal(&mut r, &[cout, cin, 3, 3, 3], (gain / (27 * cin) as f64).sqrt());
                (
                    store.add(format!("volume/w{i}"), wt, Group::Main),
                    store.add(format!("volume/b{i}"), Tensor::zeros([cout]), Group::Main),
                )
            })
            .collect();
        let adjacency = store.add("adjacency/logits", Tensor::zeros([n, n]), Group::Main);
        let mut conv = |store: &mut ParamStore, name: &str, cin: usize, cout: usize, gain: f64| {
            let wt = normal(&mut r, &[cout, cin, 3, 3], (gain / (9 * cin) as f64).sqrt());
            (
                store.add(format!("recon/{name}/w"), wt, Group::Recon),
                store.add(format!("recon/{name}/b"), Tensor::zeros([cout]), Group::Recon),
            )
        };
        let encoder = vec![conv(&mut store, "enc0", 3, rw, 2.0), conv(&mut store, "enc1", rw, rw, 2.0)];
        let decoder = (0..3)
            .map(|i| conv(&mut store, &format!("dec{i}"), rw + 1, rw, 2.0))
            .collect();
        let to_rgb = conv(&mut store, "rgb", rw, 3, 1.0);
        Ok(Self {
            config: config.clone(),
            shape,
            store,
            idx: Indices {
                layer_weights,
                bottlenecks,
                head,
                volume,
                adjacency,
                encoder,
                decoder,
                to_rgb,
            },
        })
    }

    pub fn grid(&self) -> VoxelGrid {
        VoxelGrid::cube(self.config.grid).expect("validated grid size")
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.shape.image_size[0], self.shape.image_size[1])
    }

    /// Current adjacency weights.
    pub fn adjacency(&self) -> Tensor {
        crate::structure::adjacency_values(&self.store.get(self.idx.adjacency).value)
    }

    /// Feature stack → aggregated map → keypoint head → unprojection →
    /// view fusion → volume network → soft-argmax. Returns `[N, 3]`.
    pub fn keypoints_forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        sample: &MultiViewSample,
        table: &Arc<SamplingTable>,
    ) -> Result<Var> {
        self.shape.check(sample)?;
        if table.views() != sample.views() {
            return Err(Error::Config(format!(
                "sampling table covers {} views, sample has {}",
                table.views(),
                sample.views()
            )));
        }
        let stack: Vec<Var> = sample.features()?.iter().map(|f| tape.constant(f.clone())).collect();
        let bottlenecks: Vec<Var> = self.idx.bottlenecks.iter().map(|&i| vars[i]).collect();
        let agg = aggregate_features(tape, &stack, vars[self.idx.layer_weights], &bottlenecks, self.image_size())?;
        let [w1, b1, w2, b2] = self.idx.head.map(|i| vars[i]);
        let fkp = keypoint_head(tape, agg, w1, b1, w2, b2);
        let per_view = unproject(tape, fkp, table)?;
        let fused = attention_fuse(tape, per_view, self.config.attention_temperature);
        let m = self.config.grid;
        let volume = tape.reshape(fused, &[self.config.keypoints, m, m, m]);
        let layers: Vec<(Var, Var)> = self.idx.volume.iter().map(|&(w, b)| (vars[w], vars[b])).collect();
        let heat = volume_net(tape, volume, &layers);
        Ok(integral_regression(tape, heat, table.grid()))
    }

    fn encode(&self, tape: &mut Tape, vars: &[Var], appearance: Var) -> Var {
        let mut x = appearance;
        for &(w, b) in &self.idx.encoder {
            let y = tape.conv2d(x, vars[w], Some(vars[b]), 2);
            x = tape.relu(y);
        }
        x
    }

    fn decode(&self, tape: &mut Tape, vars: &[Var], code: Var, edge_map: Var) -> Var {
        let (h, w) = self.image_size();
        let e64 = tape.reshape(edge_map, &[1, h, w]);
        let e32 = tape.avg_pool2(e64);
        let e16 = tape.avg_pool2(e32);
        let mut x = code;
        for (i, (&(wt, b), e)) in self.idx.decoder.iter().zip([e16, e32, e64]).enumerate() {
            if i > 0 {
                let (xh, xw) = (tape.shape(x)[1], tape.shape(x)[2]);
                x = tape.resize_bilinear(x, xh * 2, xw * 2);
            }
            let cat = tape.concat(&[x, e]);
            let y = tape.conv2d(cat, vars[wt], Some(vars[b]), 1);
            x = tape.relu(y);
        }
        let (wt, b) = self.idx.to_rgb;
        let rgb = tape.conv2d(x, vars[wt], Some(vars[b]), 1);
        tape.sigmoid(rgb)
    }

    /// Reconstruct a view from an appearance image `[3, H, W]` and an edge
    /// map `[H, W]`.
    pub fn reconstruct(&self, tape: &mut Tape, vars: &[Var], appearance: Var, edge_map: Var) -> Var {
        let code = self.encode(tape, vars, appearance);
        self.decode(tape, vars, code, edge_map)
    }

    /// The full training objective for one sample. `appearance` is the
    /// (augmented) input view.
    pub fn loss_forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        sample: &MultiViewSample,
        table: &Arc<SamplingTable>,
        appearance: &Tensor,
        extractor: &Extractor,
    ) -> Result<LossForward> {
        let keypoints = self.keypoints_forward(tape, vars, sample, table)?;
        let adjacency = adjacency_weights(tape, vars[self.idx.adjacency])?;
        let (h, w) = self.image_size();
        let sigma = self.config.sigma_line_for(h);
        let app = tape.constant(appearance.clone());
        let code = self.encode(tape, vars, app);
        let mut views = Vec::with_capacity(sample.views());
        for (k, camera) in sample.rig.cameras().iter().enumerate() {
            let (px, valid) = project_points_on_tape(tape, keypoints, camera, (h, w));
            let edge_map = render_edge_map(tape, px, adjacency, &valid, (h, w), sigma);
            let reconstruction = self.decode(tape, vars, code, edge_map);
            let target = Tensor::new([3, h, w], sample.images.slab(k).to_vec());
            let target = tape.constant(target);
            let vgg = perceptual_loss(tape, reconstruction, target, extractor);
            let mask = Tensor::new([h, w], sample.masks.slab(k).to_vec());
            let mask = mask_loss(tape, edge_map, &mask)?;
            views.push(ViewTerms {
                edge_map,
                reconstruction,
                vgg,
                mask,
            });
        }
        let pairs: Vec<(Var, Var)> = views.iter().map(|v| (v.vgg, v.mask)).collect();
        let total = total_loss(tape, &pairs, self.config.lambda_vgg, self.config.lambda_mask);
        Ok(LossForward { keypoints, views, total })
    }

    /// Parameter groups by component name, for reachability checks.
    pub fn component_of(name: &str) -> &str {
        name.split('/').next().unwrap_or(name)
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.store.find(name)
    }

    /// Zero the keypoint head, making the keypoint features identically 0.
    pub fn zero_head(&mut self) {
        for i in self.idx.head {
            self.store.value_mut(i).data_mut().fill(0.0);
        }
    }

    /// Zero the last volume layer, making the heatmaps uniform.
    pub fn zero_volume_output(&mut self) {
        let &(w, b) = self.idx.volume.last().unwrap();
        self.store.value_mut(w).data_mut().fill(0.0);
        self.store.value_mut(b).data_mut().fill(0.0);
    }
}
