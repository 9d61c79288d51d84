use std::fs;
use std::path::{Path, PathBuf};

use dtri::checkpoint;
use dtri::config::{parse_run_config, RunConfig, StartsKind};
use dtri::data::DataSet;
use dtri::fsio::atomic_write;
use dtri::landscape::{
    map_landscape, BasinMap, DisconnectivityGraph, DoubleWell1D, EnergySurface, ModelSurface,
    QuarticTwoWell2D,
};
use dtri::loss::{triangle_fd_check, TriangleNoise, TriangleOptions};
use dtri::metrics::{energy_gap, mode_coverage, recon_mse, uniform_probes, EvalReport};
use dtri::models::{generate, sample_prior, Models, NoiseMode};
use dtri::occlusion::{IncompleteDataset, MaskKind};
use dtri::pgm;
use dtri::rng::{normal_tensor, uniform_tensor, SeedTree};
use dtri::tape::{check_gradients, Tape};
use dtri::tensor::Tensor;
use dtri::train::{train as run_training, Trainer};

use crate::{CommonArgs, Failure};

// ── Shared plumbing ─────────────────────────────────────────────────────

fn load_config(common: &CommonArgs) -> Result<RunConfig, Failure> {
    let text = match &common.config {
        Some(path) => fs::read_to_string(path).map_err(|e| {
            Failure::Usage(format!("cannot read config file {}: {e}", path.display()))
        })?,
        None => String::new(), // all defaults
    };
    let mut cfg = parse_run_config(&text)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    let _ = threads()?;
    Ok(cfg)
}

/// DTRI_THREADS caps internal parallelism; every pipeline here is
/// single-threaded, so the value is validated and 1 is the only effective
/// setting.
fn threads() -> Result<usize, Failure> {
    match std::env::var("DTRI_THREADS") {
        Ok(v) => {
            let n: usize = v
                .parse()
                .map_err(|_| Failure::Usage(format!("DTRI_THREADS=`{v}` is not an integer")))?;
            if n == 0 {
                return Err(Failure::Usage("DTRI_THREADS must be >= 1".into()));
            }
            Ok(n)
        }
        Err(_) => Ok(1),
    }
}

fn prepare_out(common: &CommonArgs) -> Result<PathBuf, Failure> {
    let out = common
        .out
        .clone()
        .ok_or_else(|| Failure::Usage("--out DIR is required for this command".into()))?;
    if out.exists() {
        let non_empty = fs::read_dir(&out)
            .map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?
            .next()
            .is_some();
        if non_empty && !common.force {
            return Err(Failure::Usage(format!(
                "output directory {} already contains a run; pass --force to overwrite",
                out.display()
            )));
        }
    }
    fs::create_dir_all(&out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    Ok(out)
}

fn write_snapshot(dir: &Path, cfg: &RunConfig) -> Result<(), Failure> {
    atomic_write(&dir.join("config.snapshot"), cfg.render().as_bytes())?;
    Ok(())
}

fn load_models(cfg: &RunConfig) -> Result<(Models, u64), Failure> {
    let path = cfg.checkpoint_in.as_ref().ok_or_else(|| {
        Failure::Usage("this command needs a `checkpoint = PATH` config entry".into())
    })?;
    let data = checkpoint::load(path)?;
    let (models, _, iter, _) = data.into_models()?;
    Ok((models, iter))
}

/// Train/eval split: the last `holdout` examples never enter training.
fn split(data: DataSet, holdout: usize) -> (DataSet, DataSet) {
    if holdout == 0 || holdout >= data.len() {
        return (data.clone(), data);
    }
    let n = data.len();
    let train_idx: Vec<usize> = (0..n - holdout).collect();
    let eval_idx: Vec<usize> = (n - holdout..n).collect();
    let train = DataSet {
        examples: data.examples.gather_rows(&train_idx),
        labels: data.labels.as_ref().map(|l| l[..n - holdout].to_vec()),
        source: data.source.clone(),
    };
    let eval = DataSet {
        examples: data.examples.gather_rows(&eval_idx),
        labels: data.labels.as_ref().map(|l| l[n - holdout..].to_vec()),
        source: data.source,
    };
    (train, eval)
}

// ── Commands ────────────────────────────────────────────────────────────

pub fn train(common: &CommonArgs) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let out = prepare_out(common)?;
    write_snapshot(&out, &cfg)?;
    let seeds = SeedTree::new(cfg.train.seed);
    let (train_set, _) = split(cfg.data.load(&seeds)?, cfg.holdout);

    let mut trainer = match &cfg.checkpoint_in {
        Some(path) => Trainer::from_checkpoint(cfg.train.clone(), checkpoint::load(path)?)?,
        None => Trainer::new(cfg.train.clone(), cfg.model.clone())?,
    };
    let output = run_training(&mut trainer, &train_set, Some(&out))?;
    if let Some(last) = output.rows.last() {
        println!(
            "trained {} iterations; loss_alpha {:.4} loss_theta {:.4} loss_phi {:.4}",
            trainer.iter, last.loss.loss_alpha, last.loss.loss_theta, last.loss.loss_phi
        );
    }
    println!("run directory: {}", out.display());
    Ok(())
}

pub fn eval(common: &CommonArgs) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let out = prepare_out(common)?;
    write_snapshot(&out, &cfg)?;
    let (models, _) = load_models(&cfg)?;
    let seeds = SeedTree::new(cfg.train.seed);
    let (_, eval_set) = split(cfg.data.load(&seeds)?, cfg.holdout);

    let recon = recon_mse(&eval_set, &models.gen, &models.inf)?;
    let probes = uniform_probes(
        &models.config.signal_shape,
        cfg.probe_lo,
        cfg.probe_hi,
        cfg.probe_count,
        &mut seeds.stream("probes", &[]),
    );
    let gap = energy_gap(&models.en, &eval_set.examples, &probes)?;
    let coverage = match cfg.data.mode_centers() {
        Some(modes) => {
            let n = cfg.probe_count.max(256);
            let z = sample_prior(n, models.config.latent_dim, &mut seeds.stream("eval-sample", &[]))?;
            let samples =
                generate(&models.gen, &z, NoiseMode::None, &mut seeds.stream("unused", &[]))?;
            Some(mode_coverage(&samples, &modes, cfg.mode_radius)?)
        }
        None => None,
    };
    let report =
        EvalReport { recon_mse: recon, energy_gap: gap, mode_coverage: coverage, basin_purity: None };
    let json = report.to_json();
    atomic_write(&out.join("eval.json"), json.as_bytes())?;
    println!("{json}");
    Ok(())
}

fn basin_summary_csv(basins: &BasinMap, dg: &DisconnectivityGraph) -> String {
    let mut out = String::from("basin,size,min_energy,purity\n");
    for leaf in &dg.leaves {
        let m = &basins.minima[leaf.minimum];
        out.push_str(&format!(
            "{},{},{},{}\n",
            leaf.minimum,
            m.members.len(),
            m.energy,
            leaf.purity.map_or(String::from(""), |p| p.to_string()),
        ));
    }
    out
}

fn write_basin_exemplars(
    dir: &Path,
    basins: &BasinMap,
    starts: &Tensor,
    signal_shape: &[usize],
) -> Result<(), Failure> {
    if signal_shape.len() != 3 {
        return Ok(()); // non-image signals have no exemplar grids
    }
    for (idx, minimum) in basins.minima.iter().enumerate() {
        if minimum.members.is_empty() {
            continue;
        }
        // At most 12 members, lowest start energy first.
        let mut members = minimum.members.clone();
        members.sort_by(|&a, &b| basins.start_energies[a].total_cmp(&basins.start_energies[b]));
        members.truncate(12);
        let grid = starts.gather_rows(&members);
        let name = format!("basin_{idx}_E{:.4}.pgm", minimum.energy);
        pgm::write_grid(&dir.join(name), &grid, 4)?;
    }
    Ok(())
}

pub fn map(common: &CommonArgs, analytic: Option<&str>) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let out = prepare_out(common)?;
    write_snapshot(&out, &cfg)?;
    let seeds = SeedTree::new(cfg.train.seed);

    let (surface, starts, labels): (Box<dyn EnergySurface>, Tensor, Option<Vec<u8>>) =
        match analytic {
            Some("doublewell") => {
                let starts =
                    uniform_tensor(&mut seeds.stream("map-starts", &[]), &[200, 1], -1.5, 1.5);
                (Box::new(DoubleWell1D), starts, None)
            }
            Some("quartic2d") => {
                let starts =
                    uniform_tensor(&mut seeds.stream("map-starts", &[]), &[200, 2], -1.8, 1.8);
                (Box::new(QuarticTwoWell2D), starts, None)
            }
            Some(other) => {
                return Err(Failure::Usage(format!(
                    "unknown analytic surface `{other}`; valid: doublewell, quartic2d"
                )))
            }
            None => {
                let (models, _) = load_models(&cfg)?;
                let data = cfg.data.load(&seeds)?;
                let cap = cfg.max_starts.unwrap_or(usize::MAX);
                let (starts, labels) = match cfg.starts {
                    StartsKind::Data => {
                        let d = data.take(cap.min(data.len()));
                        (d.examples, d.labels)
                    }
                    StartsKind::Samples => {
                        let n = cfg.max_starts.unwrap_or(data.len());
                        let z = sample_prior(
                            n,
                            models.config.latent_dim,
                            &mut seeds.stream("map-samples", &[]),
                        )?;
                        let s = generate(
                            &models.gen,
                            &z,
                            NoiseMode::None,
                            &mut seeds.stream("unused", &[]),
                        )?;
                        (s, None)
                    }
                    StartsKind::Both => {
                        let d = data.take(cap.min(data.len()));
                        let n = d.len();
                        let z = sample_prior(
                            n,
                            models.config.latent_dim,
                            &mut seeds.stream("map-samples", &[]),
                        )?;
                        let s = generate(
                            &models.gen,
                            &z,
                            NoiseMode::None,
                            &mut seeds.stream("unused", &[]),
                        )?;
                        let mut rows: Vec<Tensor> = Vec::new();
                        let shape = d.signal_shape().to_vec();
                        for i in 0..n {
                            rows.push(Tensor::from_vec(shape.clone(), d.examples.row(i).to_vec())?);
                        }
                        for i in 0..n {
                            rows.push(Tensor::from_vec(shape.clone(), s.row(i).to_vec())?);
                        }
                        (Tensor::stack(&rows)?, None)
                    }
                };
                let surface = OwnedModelSurface { models };
                (Box::new(surface), starts, labels)
            }
        };

    if starts.shape()[0] == 0 {
        return Err(Failure::Usage("landscape mapping needs at least one start point".into()));
    }
    let (basins, dg) = map_landscape(surface.as_ref(), &starts, labels.as_deref(), &cfg.landscape)?;
    atomic_write(&out.join("dg.json"), dg.to_json().as_bytes())?;
    atomic_write(&out.join("dg.dot"), dg.to_dot().as_bytes())?;
    atomic_write(&out.join("basin_summary.csv"), basin_summary_csv(&basins, &dg).as_bytes())?;
    write_basin_exemplars(&out, &basins, &starts, &surface.signal_shape())?;
    let rendered = dg.leaves.iter().filter(|l| l.rendered).count();
    println!(
        "mapped {} starts into {} minima ({} basins of size >= {}); {} merges",
        starts.shape()[0],
        basins.minima.len(),
        rendered,
        cfg.landscape.min_basin_size,
        dg.merges.len()
    );
    println!("run directory: {}", out.display());
    Ok(())
}

/// Surface wrapper owning its models (checkpoint-loaded).
struct OwnedModelSurface {
    models: Models,
}

impl EnergySurface for OwnedModelSurface {
    fn signal_shape(&self) -> Vec<usize> {
        self.models.en.signal_shape.clone()
    }
    fn batch_energy(&self, xs: &Tensor) -> dtri::Result<Vec<f64>> {
        ModelSurface { en: &self.models.en }.batch_energy(xs)
    }
    fn batch_energy_grad(&self, xs: &Tensor) -> dtri::Result<(Vec<f64>, Tensor)> {
        ModelSurface { en: &self.models.en }.batch_energy_grad(xs)
    }
}

pub fn recover(common: &CommonArgs, mask: Option<&str>) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let out = prepare_out(common)?;
    write_snapshot(&out, &cfg)?;
    let tag = mask
        .map(str::to_string)
        .or_else(|| cfg.mask_tag.clone())
        .ok_or_else(|| {
            Failure::Usage(
                "recover needs a mask (--mask TAG or `mask = TAG`); valid: P.5, P.7, MB10, B20, B30"
                    .into(),
            )
        })?;
    let kind = MaskKind::parse_tag(&tag)?;
    let seeds = SeedTree::new(cfg.train.seed);
    let (train_set, _) = split(cfg.data.load(&seeds)?, cfg.holdout);
    let mut ds = IncompleteDataset::new(train_set, &kind, &seeds)?;

    // Fig-style grids: originals, zero-filled occlusions, final recoveries.
    let n_show = 16.min(ds.len());
    let show: Vec<usize> = (0..n_show).collect();
    pgm::write_grid(&out.join("originals.pgm"), &ds.ground_truth.examples.gather_rows(&show), 8)?;
    pgm::write_grid(&out.join("occluded.pgm"), &ds.composite()?.gather_rows(&show), 8)?;

    let mut trainer = match &cfg.checkpoint_in {
        Some(path) => Trainer::from_checkpoint(cfg.train.clone(), checkpoint::load(path)?)?,
        None => Trainer::new(cfg.train.clone(), cfg.model.clone())?,
    };
    let result = dtri::occlusion::train_incomplete(
        &mut trainer,
        &mut ds,
        cfg.recovery_interval_epochs,
        Some(&out),
    )?;
    pgm::write_grid(&out.join("recovered.pgm"), &ds.composite()?.gather_rows(&show), 8)?;
    checkpoint::save(&out.join("ckpt_final.dtri"), &trainer.checkpoint_data())?;
    println!(
        "mask {tag}: baseline error {:.4}, final error {:.4} ({} fill updates)",
        result.baseline_error,
        result.final_error,
        result.rows.len().saturating_sub(1)
    );
    println!("run directory: {}", out.display());
    Ok(())
}

pub fn sample(common: &CommonArgs) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let out = prepare_out(common)?;
    let (models, _) = load_models(&cfg)?;
    let seeds = SeedTree::new(cfg.train.seed);
    let z = sample_prior(cfg.sample_count, models.config.latent_dim, &mut seeds.stream("sample-cli", &[]))?;
    let x = generate(&models.gen, &z, NoiseMode::None, &mut seeds.stream("unused", &[]))?;
    if models.config.signal_shape.len() == 3 {
        pgm::write_grid(&out.join("samples.pgm"), &x, 8)?;
        println!("wrote {} samples to {}", cfg.sample_count, out.join("samples.pgm").display());
    } else {
        let mut csv = String::new();
        for i in 0..x.shape()[0] {
            let row: Vec<String> = x.row(i).iter().map(|v| v.to_string()).collect();
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
        atomic_write(&out.join("samples.csv"), csv.as_bytes())?;
        println!("wrote {} samples to {}", cfg.sample_count, out.join("samples.csv").display());
    }
    Ok(())
}

pub fn gradcheck(_common: &CommonArgs) -> Result<(), Failure> {
    let _ = threads()?;
    let mut all_pass = true;
    let mut run = |name: &str, result: Result<(bool, f64), dtri::Error>| match result {
        Ok((pass, err)) => {
            println!("{} {name} (max rel err {err:.3e})", if pass { "PASS" } else { "FAIL" });
            all_pass &= pass;
        }
        Err(e) => {
            println!("FAIL {name} (error: {e})");
            all_pass = false;
        }
    };

    let seeds = SeedTree::new(1234);

    run("matmul gradient vs finite differences", {
        let a = normal_tensor(&mut seeds.stream("gc-mm", &[0]), &[3, 4]);
        let b = normal_tensor(&mut seeds.stream("gc-mm", &[1]), &[4, 2]);
        check_gradients(
            |tape, vals| {
                let p = tape.matmul(vals[0], vals[1])?;
                let s = tape.square(p);
                tape.sum_all(s)
            },
            &[a, b],
            1e-5,
            1e-6,
        )
        .map(|r| (r.pass, r.max_rel_err))
    });

    run("conv2d gradient vs finite differences", {
        let x = normal_tensor(&mut seeds.stream("gc-conv", &[0]), &[2, 3, 8, 8]);
        let w = normal_tensor(&mut seeds.stream("gc-conv", &[1]), &[4, 3, 4, 4]);
        check_gradients(
            |tape, vals| {
                let y = tape.conv2d(vals[0], vals[1], 2, 1)?;
                let s = tape.square(y);
                tape.sum_all(s)
            },
            &[x, w],
            1e-5,
            1e-5,
        )
        .map(|r| (r.pass, r.max_rel_err))
    });

    run("conv_transpose2d gradient vs finite differences", {
        let x = normal_tensor(&mut seeds.stream("gc-convt", &[0]), &[2, 4, 3, 3]);
        let w = normal_tensor(&mut seeds.stream("gc-convt", &[1]), &[4, 2, 4, 4]);
        check_gradients(
            |tape, vals| {
                let y = tape.conv_transpose2d(vals[0], vals[1], 2, 1)?;
                let s = tape.square(y);
                tape.sum_all(s)
            },
            &[x, w],
            1e-5,
            1e-5,
        )
        .map(|r| (r.pass, r.max_rel_err))
    });

    run("conv adjoint identity", {
        let x = normal_tensor(&mut seeds.stream("gc-adj", &[0]), &[2, 3, 6, 6]);
        let w = normal_tensor(&mut seeds.stream("gc-adj", &[1]), &[5, 3, 3, 3]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        (|| {
            let ax = tape.conv2d(xv, wv, 1, 1)?;
            let y = normal_tensor(&mut seeds.stream("gc-adj", &[2]), tape.value(ax).shape());
            let yv = tape.constant(y.clone());
            let aty = tape.conv_transpose2d(yv, wv, 1, 1)?;
            let lhs: f64 = tape.value(ax).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 =
                x.data().iter().zip(tape.value(aty).data()).map(|(a, b)| a * b).sum();
            let err = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0);
            Ok((err < 1e-10, err))
        })()
    });

    run("elementwise chain gradient vs finite differences", {
        let a = normal_tensor(&mut seeds.stream("gc-ew", &[0]), &[6]);
        check_gradients(
            |tape, vals| {
                let t = tape.tanh(vals[0]);
                let e = tape.exp(t);
                let lr = tape.leaky_relu(e, 0.2);
                let s = tape.square(lr);
                tape.mean_all(s)
            },
            &[a],
            1e-5,
            1e-6,
        )
        .map(|r| (r.pass, r.max_rel_err))
    });

    run("triangle losses vs finite differences (mlp, batch 4)", {
        let models = Models::new(
            dtri::models::ModelConfig::mlp(vec![8, 8], 2, 8),
            &SeedTree::new(77),
        )
        .and_then(|models| {
            let x = normal_tensor(&mut seeds.stream("gc-tri", &[0]), &[4, 8]);
            let z = normal_tensor(&mut seeds.stream("gc-tri", &[1]), &[4, 2]);
            let noise = TriangleNoise::draw(
                &models,
                4,
                4,
                NoiseMode::Gaussian,
                &mut seeds.stream("gc-tri", &[2]),
                &mut seeds.stream("gc-tri", &[3]),
            );
            triangle_fd_check(&models, &x, &z, &TriangleOptions::default(), &noise, 1e-5)
        });
        models.map(|err| (err < 1e-4, err))
    });

    if all_pass {
        println!("all gradient checks passed");
        Ok(())
    } else {
        Err(Failure::Runtime("gradient checks failed".into()))
    }
}
