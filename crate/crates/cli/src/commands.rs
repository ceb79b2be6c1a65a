use crate::manifest::{Recorder, MANIFEST_FILE};
use crate::*;
use keyvol::backbone::{dataset_hash, generate_dataset, load_dataset, read_bundle, MultiViewSample, RigParams, SceneSpec};
use keyvol::evaluation::{bbox_diagonal, evaluate_regressor, fit_regressor, unflatten_pose, RegressorSpec};
use keyvol::geometry::pixel_to_array;
use keyvol::keypoints::KeypointSet3D;
use keyvol::rigging::{
    default_sigma, export_rig_bundle, extract_skeleton, import_rig_bundle, reference, skinning_weights, Mesh, Pose,
    RigBundle, RigParameters,
};
use keyvol::training::{predict_keypoints, Checkpoint, TableCache, TrainConfig, Trainer};
use keyvol::Tensor;
use serde::Serialize;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

type Outcome = Result<(), Failure>;

fn require_exists(p: &Path, what: &str) -> Outcome {
    if p.exists() {
        Ok(())
    } else {
        Err(Failure::data(format!("{what} not found: {}", p.display())))
    }
}

fn check_device(d: &DeviceArg) -> Outcome {
    match d.device.as_str() {
        "cpu" => Ok(()),
        other => Err(Failure::config(format!("device `{other}` is not available; only `cpu` is supported"))),
    }
}

fn write_text(p: &Path, text: &str) -> Outcome {
    if let Some(dir) = p.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(p, text).map_err(|e| Failure::data(format!("{}: {e}", p.display())))
}

fn to_json(v: &impl Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

pub fn generate(a: GenerateArgs) -> Outcome {
    let mut rec = Recorder::new("generate-synthetic");
    let scene = match a.scene {
        SceneKind::Figure => SceneSpec::figure(a.seed),
        SceneKind::SingleJoint => SceneSpec::single_joint(a.seed),
    };
    let rig = RigParams {
        views: a.views,
        elevation_deg: a.elevation,
        radius: a.radius,
        image_size: [a.image_size, a.image_size],
    };
    rig.build().map_err(|e| Failure::config(e.to_string()))?;
    let index = generate_dataset(&a.out, a.count, &scene, &rig, a.seed)?;
    let hash = dataset_hash(&a.out, &[MANIFEST_FILE])?;
    log::info!("wrote {} samples to {} (content hash {hash})", index.samples.len(), a.out.display());
    rec.seed(a.seed)
        .config(serde_json::json!({ "count": a.count, "scene": scene, "rig": rig, "content_hash": hash }))
        .output(&a.out);
    rec.finish(&a.out)?;
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => {
            require_exists(p, "config file")?;
            let text = fs::read_to_string(p)?;
            TrainConfig::from_json(&text).map_err(|e| Failure::config(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(k) = a.views {
        cfg.views = k;
    }
    if let Some(n) = a.keypoints {
        cfg.keypoints = n;
    }
    if let Some(m) = a.grid {
        cfg.grid = m;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    cfg.validate().map_err(|e| Failure::config(e.to_string()))?;
    Ok(cfg)
}

pub fn train(a: TrainArgs) -> Outcome {
    let mut rec = Recorder::new("train");
    check_device(&a.device)?;
    let checkpoint = match &a.resume {
        Some(p) => {
            require_exists(p, "checkpoint")?;
            Some(Checkpoint::load(p)?)
        }
        None => None,
    };
    let cfg = match &checkpoint {
        Some(c) => {
            let mut cfg = c.model.config.clone();
            if let Some(s) = a.steps {
                cfg.steps = s;
            }
            cfg
        }
        None => train_config(&a)?,
    };
    require_exists(&a.dataset, "dataset")?;
    let (_, samples) = load_dataset(&a.dataset)?;
    if samples.is_empty() {
        return Err(Failure::data(format!("dataset {} has no samples", a.dataset.display())));
    }
    let mut trainer = match checkpoint {
        Some(c) => Trainer::resume(c, &samples)?,
        None => Trainer::new(&cfg, &samples)?,
    };
    fs::create_dir_all(&a.out)?;
    let log_path = a.out.join("train_log.jsonl");
    let mut log = BufWriter::new(fs::File::create(&log_path)?);
    let ckpt_dir = a.out.join("checkpoints");
    trainer.run(cfg.steps, Some(&mut log), Some(&ckpt_dir), |_| {})?;
    log.flush()?;
    let model_path = a.out.join("model.tar");
    trainer.checkpoint.save(&model_path)?;
    log::info!("trained to step {}; model written to {}", trainer.checkpoint.step, model_path.display());
    rec.seed(cfg.seed).config(&cfg).input(&a.dataset);
    if let Some(p) = &a.resume {
        rec.input(p);
    }
    rec.output(&model_path).output(&log_path).output(&ckpt_dir);
    rec.finish(&a.out)?;
    Ok(())
}

/// Named samples from a dataset directory or a single sample bundle.
fn load_input(p: &Path) -> Result<Vec<(String, MultiViewSample)>, Failure> {
    require_exists(p, "input")?;
    if p.join(keyvol::backbone::DATASET_INDEX_FILE).exists() {
        let (index, samples) = load_dataset(p)?;
        Ok(index.samples.into_iter().zip(samples).collect())
    } else {
        let name = p.file_name().map_or("sample".into(), |n| n.to_string_lossy().into_owned());
        Ok(vec![(name, read_bundle(p)?)])
    }
}

fn load_checkpoint(p: &Path, keypoints: Option<usize>, grid: Option<usize>) -> Result<Checkpoint, Failure> {
    require_exists(p, "checkpoint")?;
    let c = Checkpoint::load(p)?;
    let cfg = &c.model.config;
    if let Some(n) = keypoints.filter(|&n| n != cfg.keypoints) {
        return Err(Failure::config(format!("checkpoint has {} keypoints, --keypoints asks for {n}", cfg.keypoints)));
    }
    if let Some(m) = grid.filter(|&m| m != cfg.grid) {
        return Err(Failure::config(format!("checkpoint uses a {0}³ grid, --grid asks for {m}³", cfg.grid)));
    }
    Ok(c)
}

#[derive(Serialize)]
struct ViewProjection {
    /// Centered continuous pixel coordinates.
    pixel: Vec<[f64; 2]>,
    /// Array `(col, row)` coordinates.
    array: Vec<[f64; 2]>,
    valid: Vec<bool>,
}

fn predict(c: &Checkpoint, sample: &MultiViewSample, tables: &mut TableCache) -> Result<KeypointSet3D, Failure> {
    c.model.shape.check(sample)?;
    let t = predict_keypoints(&c.model, sample, tables)?;
    let set = KeypointSet3D::from_tensor(&t, c.model.grid());
    set.validate()?;
    Ok(set)
}

pub fn infer(a: InferArgs) -> Outcome {
    let mut rec = Recorder::new("infer");
    check_device(&a.device)?;
    let c = load_checkpoint(&a.checkpoint, a.keypoints, a.grid)?;
    let samples = load_input(&a.input)?;
    let mut tables = TableCache::default();
    for (name, sample) in &samples {
        let set = predict(&c, sample, &mut tables)?;
        write_text(&a.out.join("keypoints").join(format!("{name}.json")), &(set.to_json() + "\n"))?;
        let size = sample.image_size();
        let views: Vec<ViewProjection> = sample
            .rig
            .cameras()
            .iter()
            .map(|cam| {
                let pts = cam.project_points(&set.points());
                ViewProjection {
                    pixel: pts.iter().map(|p| [p.pixel.x, p.pixel.y]).collect(),
                    array: pts.iter().map(|p| pixel_to_array(p.pixel, size)).map(|q| [q.x, q.y]).collect(),
                    valid: pts.iter().map(|p| p.valid).collect(),
                }
            })
            .collect();
        write_text(&a.out.join("projections").join(format!("{name}.json")), &to_json(&views))?;
        if a.overlays {
            for (k, v) in views.iter().enumerate() {
                let img = overlay(&sample.images, k, v);
                let p = a.out.join("overlays").join(format!("{name}_view{k}.png"));
                fs::create_dir_all(p.parent().unwrap())?;
                img.save(&p).map_err(|e| Failure::data(format!("{}: {e}", p.display())))?;
            }
        }
    }
    log::info!("predicted keypoints for {} samples", samples.len());
    rec.config(serde_json::json!({ "model": &c.model.config, "step": c.step, "overlays": a.overlays }))
        .seed(c.model.config.seed)
        .input(&a.checkpoint)
        .input(&a.input)
        .output(&a.out.join("keypoints"))
        .output(&a.out.join("projections"));
    if a.overlays {
        rec.output(&a.out.join("overlays"));
    }
    rec.finish(&a.out)?;
    Ok(())
}

/// View `k` of `[K, 3, H, W]` images with each valid keypoint marked.
fn overlay(images: &Tensor, k: usize, v: &ViewProjection) -> image::RgbImage {
    let (h, w) = (images.dim(2), images.dim(3));
    let d = images.data();
    let mut img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| (d[((k * 3 + c) * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([at(0), at(1), at(2)])
    });
    const COLORS: [[u8; 3]; 6] = [[230, 25, 75], [60, 180, 75], [0, 130, 200], [245, 130, 48], [145, 30, 180], [240, 50, 230]];
    for (i, (q, &ok)) in v.array.iter().zip(&v.valid).enumerate() {
        if !ok {
            continue;
        }
        let (cx, cy) = (q[0].round() as i64, q[1].round() as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (x, y) = (cx + dx, cy + dy);
                if (0..w as i64).contains(&x) && (0..h as i64).contains(&y) {
                    img.put_pixel(x as u32, y as u32, image::Rgb(COLORS[i % COLORS.len()]));
                }
            }
        }
    }
    img
}

pub fn evaluate(a: EvaluateArgs) -> Outcome {
    let mut rec = Recorder::new("evaluate");
    check_device(&a.device)?;
    let spec = match a.regressor {
        RegressorChoice::Linear => RegressorSpec::linear(),
        RegressorChoice::Mlp => RegressorSpec::mlp(),
    };
    let c = load_checkpoint(&a.checkpoint, None, None)?;
    require_exists(&a.dataset, "dataset")?;
    let (_, samples) = load_dataset(&a.dataset)?;
    if a.held_out == 0 || a.held_out >= samples.len() {
        return Err(Failure::config(format!(
            "--held-out {} must be between 1 and {} for a {}-sample dataset",
            a.held_out,
            samples.len().saturating_sub(1),
            samples.len()
        )));
    }
    let mut tables = TableCache::default();
    let mut inputs = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let gt = s
            .ground_truth_joints
            .as_ref()
            .ok_or_else(|| Failure::data(format!("sample {i} has no ground-truth joints")))?;
        inputs.push(predict(&c, s, &mut tables)?.to_tensor().data().to_vec());
        targets.push(gt.data().to_vec());
    }
    let split = samples.len() - a.held_out;
    let regressor = fit_regressor(&inputs[..split], &targets[..split], &spec, a.seed)?;
    let summary = evaluate_regressor(&regressor, &inputs[split..], &targets[split..])?;
    let diagonal =
        targets[split..].iter().map(|t| bbox_diagonal(&unflatten_pose(t))).sum::<f64>() / a.held_out as f64;
    let report = serde_json::json!({
        "regressor": &spec,
        "fit_frames": split,
        "held_out_frames": a.held_out,
        "summary": &summary,
        "mean_bbox_diagonal": diagonal,
        "mpjpe_fraction_of_diagonal": summary.mpjpe.mean / diagonal,
    });
    let out = a.out.join("metrics.json");
    write_text(&out, &to_json(&report))?;
    println!(
        "MPJPE {:.4} ({:.1}% of diagonal)  N-MPJPE {:.4}  P-MPJPE {:.4}",
        summary.mpjpe.mean,
        100.0 * summary.mpjpe.mean / diagonal,
        summary.n_mpjpe.mean,
        summary.p_mpjpe.mean
    );
    rec.seed(a.seed)
        .config(serde_json::json!({ "regressor": &spec, "held_out": a.held_out }))
        .input(&a.checkpoint)
        .input(&a.dataset)
        .output(&out);
    rec.finish(&a.out)?;
    Ok(())
}

fn read_adjacency(p: &Path, n: usize) -> Result<Tensor, Failure> {
    require_exists(p, "adjacency file")?;
    let rows: Vec<Vec<f64>> = serde_json::from_str(&fs::read_to_string(p)?)
        .map_err(|e| Failure::data(format!("{}: {e}", p.display())))?;
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Failure::data(format!("{}: adjacency must be {n}×{n}", p.display())));
    }
    Ok(Tensor::new([n, n], rows.concat()))
}

pub fn rig(a: RigArgs) -> Outcome {
    let mut rec = Recorder::new("rig");
    require_exists(&a.keypoints, "keypoints file")?;
    let set = KeypointSet3D::from_json(&fs::read_to_string(&a.keypoints)?)?;
    require_exists(&a.mesh, "mesh")?;
    let mesh = Mesh::load(&a.mesh)?;
    let n = set.len();
    let adjacency = match (&a.checkpoint, &a.adjacency) {
        (Some(p), _) => {
            let c = load_checkpoint(p, Some(n), None)?;
            rec.input(p);
            c.model.adjacency()
        }
        (None, Some(p)) => {
            rec.input(p);
            read_adjacency(p, n)?
        }
        (None, None) => {
            let mut t = Tensor::zeros([n, n]);
            for i in 0..n {
                for j in (0..n).filter(|&j| j != i) {
                    t.data_mut()[i * n + j] = 0.5;
                }
            }
            t
        }
    };
    let skeleton = extract_skeleton(&set.points(), &adjacency, a.root)?;
    let parameters = RigParameters {
        sigma: a.sigma.unwrap_or_else(|| default_sigma(&skeleton)),
        alpha: a.alpha,
    };
    if !(parameters.sigma > 0.0 && parameters.alpha > 0.0) {
        return Err(Failure::config("--sigma and --alpha must be positive"));
    }
    let weights = skinning_weights(&mesh, &skeleton, parameters.sigma, parameters.alpha)?;
    let bundle = RigBundle {
        mesh,
        keypoints: set.positions.clone(),
        skeleton,
        weights,
        adjacency,
        parameters,
    };
    export_rig_bundle(&bundle, &a.out)?;
    log::info!("rig with {} edges written to {}", bundle.skeleton.edges.len(), a.out.display());
    rec.config(serde_json::json!({ "root": bundle.skeleton.root, "parameters": parameters }))
        .input(&a.keypoints)
        .input(&a.mesh)
        .output(&a.out);
    rec.finish(&a.out)?;
    Ok(())
}

pub fn pose(a: PoseArgs) -> Outcome {
    let mut rec = Recorder::new("pose");
    require_exists(&a.rig, "rig")?;
    require_exists(&a.pose, "pose file")?;
    let bundle = import_rig_bundle(&a.rig)?;
    let pose = Pose::load(&a.pose)?;
    let vertices = bundle.deform(&pose)?;
    let out = a.out.join("posed.obj");
    fs::create_dir_all(&a.out)?;
    bundle.mesh.with_points(&vertices).save(&out)?;
    rec.config(&pose).input(&a.rig).input(&a.pose).output(&out);
    rec.finish(&a.out)?;
    Ok(())
}

#[derive(Serialize)]
struct ExpectedVertices {
    bbox_diagonal: f64,
    vertices: Vec<[f64; 3]>,
}

pub fn make_test_rig(a: MakeTestRigArgs) -> Outcome {
    let mut rec = Recorder::new("make-test-rig");
    let bundle = reference::reference_rig()?;
    let rig_dir = a.out.join("rig");
    export_rig_bundle(&bundle, &rig_dir)?;
    let diagonal = bbox_diagonal(&bundle.mesh.points());
    let poses_dir = a.out.join("poses");
    for (i, pose) in reference::reference_poses(bundle.skeleton.edges.len()).iter().enumerate() {
        write_text(&poses_dir.join(format!("pose_{i}.json")), &pose.to_json())?;
        let vertices = bundle.deform(pose)?.iter().map(|v| [v.x, v.y, v.z]).collect();
        let expected = ExpectedVertices { bbox_diagonal: diagonal, vertices };
        write_text(&poses_dir.join(format!("expected_{i}.json")), &to_json(&expected))?;
    }
    rec.output(&rig_dir).output(&poses_dir);
    rec.finish(&a.out)?;
    Ok(())
}

pub fn serve(a: ServeArgs) -> Outcome {
    if !a.dir.is_dir() {
        return Err(Failure::data(format!("directory not found: {}", a.dir.display())));
    }
    let runtime = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .map_err(|e| Failure::config(format!("cannot listen on {}:{}: {e}", a.host, a.port)))?;
        let addr = listener.local_addr()?;
        println!("serving {} at http://{addr}/", a.dir.display());
        std::io::stdout().flush()?;
        let app = axum::Router::new().fallback_service(tower_http::services::ServeDir::new(&a.dir));
        axum::serve(listener, app).await?;
        Ok(())
    })
}
