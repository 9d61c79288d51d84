//! Learning from incomplete images: occlusion mask generation, zero-fill
//! initialization, iterative refresh of the missing pixels from generator
//! reconstructions during training, and range-relative recovery error.
//!
//! Ground truth stays strictly out of the training path: the models only ever
//! see composites (visible pixels from the truth, occluded pixels from the
//! current fill), and the wake reconstruction loss is masked so imputed
//! pixels do not contribute.

use std::path::Path;

use rand::Rng;

use crate::data::{permutation_batches, DataSet};
use crate::error::{Error, Result};
use crate::fsio::atomic_write;
use crate::metrics::reconstruct_mean;
use crate::rng::SeedTree;
use crate::tensor::Tensor;
use crate::train::Trainer;

#[derive(Clone, Debug, PartialEq)]
pub enum MaskKind {
    SaltPepper { ratio: f64 },
    MultiBlock { count: usize, size: usize },
    SingleBlock { size: usize },
}

impl MaskKind {
    /// Standard tags: P.5, P.7 (salt-and-pepper 50%/70%), MB10 (ten 10x10
    /// blocks), B20/B30 (one 20x20 or 30x30 block). Explicit forms:
    /// `salt:RATIO`, `block:SIZE`, `multiblock:COUNTxSIZE`.
    pub fn parse_tag(tag: &str) -> Result<MaskKind> {
        match tag {
            "P.5" => Ok(MaskKind::SaltPepper { ratio: 0.5 }),
            "P.7" => Ok(MaskKind::SaltPepper { ratio: 0.7 }),
            "MB10" => Ok(MaskKind::MultiBlock { count: 10, size: 10 }),
            "B20" => Ok(MaskKind::SingleBlock { size: 20 }),
            "B30" => Ok(MaskKind::SingleBlock { size: 30 }),
            other => {
                if let Some(r) = other.strip_prefix("salt:") {
                    let ratio: f64 = r
                        .parse()
                        .map_err(|_| Error::Config(format!("mask tag `{other}`: bad ratio")))?;
                    return Ok(MaskKind::SaltPepper { ratio });
                }
                if let Some(s) = other.strip_prefix("block:") {
                    let size: usize = s
                        .parse()
                        .map_err(|_| Error::Config(format!("mask tag `{other}`: bad size")))?;
                    return Ok(MaskKind::SingleBlock { size });
                }
                if let Some(cs) = other.strip_prefix("multiblock:") {
                    let (c, s) = cs.split_once('x').ok_or_else(|| {
                        Error::Config(format!("mask tag `{other}`: expected COUNTxSIZE"))
                    })?;
                    let count: usize = c
                        .parse()
                        .map_err(|_| Error::Config(format!("mask tag `{other}`: bad count")))?;
                    let size: usize = s
                        .parse()
                        .map_err(|_| Error::Config(format!("mask tag `{other}`: bad size")))?;
                    return Ok(MaskKind::MultiBlock { count, size });
                }
                Err(Error::Config(format!(
                    "unknown mask tag `{other}`; valid: P.5, P.7, MB10, B20, B30, \
                     salt:RATIO, block:SIZE, multiblock:COUNTxSIZE"
                )))
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            MaskKind::SaltPepper { ratio } => format!("salt_pepper({ratio})"),
            MaskKind::MultiBlock { count, size } => format!("multi_block({count},{size})"),
            MaskKind::SingleBlock { size } => format!("single_block({size})"),
        }
    }
}

/// Per-image visibility pattern; `visible` is signal-shaped with 1.0 on
/// observed pixels and 0.0 on occluded ones (identical across channels).
#[derive(Clone, Debug)]
pub struct OcclusionMask {
    pub visible: Tensor,
    pub kind: MaskKind,
    /// Audit record: occluded pixel indices (salt-and-pepper) or block
    /// corners as flat h*W+w offsets (blocks).
    pub placement: Vec<usize>,
}

impl OcclusionMask {
    pub fn occluded_count(&self) -> usize {
        // Counted on one channel (masks are identical across channels).
        let per_chan: usize = self.visible.shape()[1..].iter().product();
        self.visible.data()[..per_chan].iter().filter(|&&v| v == 0.0).count()
    }
}

/// Generate one mask for a `[c, h, w]` signal.
pub fn make_mask(kind: &MaskKind, signal_shape: &[usize], rng: &mut impl Rng) -> Result<OcclusionMask> {
    if signal_shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "occlusion masks need [c,h,w] signals, got {signal_shape:?}"
        )));
    }
    let (c, h, w) = (signal_shape[0], signal_shape[1], signal_shape[2]);
    let mut plane = vec![1.0f64; h * w];
    let mut placement = Vec::new();
    match kind {
        MaskKind::SaltPepper { ratio } => {
            if !(0.0..=1.0).contains(ratio) {
                return Err(Error::Config(format!("salt-and-pepper ratio {ratio} outside [0,1]")));
            }
            let k = (ratio * (h * w) as f64).floor() as usize;
            let picked = rand::seq::index::sample(rng, h * w, k);
            for idx in picked.iter() {
                plane[idx] = 0.0;
                placement.push(idx);
            }
            placement.sort_unstable();
        }
        MaskKind::MultiBlock { count, size } => {
            if *size > h || *size > w {
                return Err(Error::Config(format!("block {size} exceeds {h}x{w} image")));
            }
            for _ in 0..*count {
                let top = rng.random_range(0..=(h - size));
                let left = rng.random_range(0..=(w - size));
                placement.push(top * w + left);
                for dy in 0..*size {
                    for dx in 0..*size {
                        plane[(top + dy) * w + left + dx] = 0.0;
                    }
                }
            }
        }
        MaskKind::SingleBlock { size } => {
            if *size > h || *size > w {
                return Err(Error::Config(format!("block {size} exceeds {h}x{w} image")));
            }
            let top = rng.random_range(0..=(h - size));
            let left = rng.random_range(0..=(w - size));
            placement.push(top * w + left);
            for dy in 0..*size {
                for dx in 0..*size {
                    plane[(top + dy) * w + left + dx] = 0.0;
                }
            }
        }
    }
    let mut data = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        data.extend_from_slice(&plane);
    }
    Ok(OcclusionMask {
        visible: Tensor::from_vec(signal_shape.to_vec(), data)?,
        kind: kind.clone(),
        placement,
    })
}

/// Visible pixels from the truth, occluded pixels from the fill.
pub fn apply_fill(ground_truth: &Tensor, visible: &Tensor, fill: &Tensor) -> Result<Tensor> {
    if ground_truth.shape() != visible.shape() || ground_truth.shape() != fill.shape() {
        return Err(Error::ShapeMismatch(format!(
            "apply_fill: gt {:?}, visible {:?}, fill {:?}",
            ground_truth.shape(),
            visible.shape(),
            fill.shape()
        )));
    }
    let mut out = ground_truth.clone();
    for ((o, &v), &f) in out.data_mut().iter_mut().zip(visible.data()).zip(fill.data()) {
        if v == 0.0 {
            *o = f;
        }
    }
    Ok(out)
}

/// Mean over occluded pixels of |recovered - truth| / range.
pub fn recovery_error_with_range(
    recovered: &Tensor,
    ground_truth: &Tensor,
    visible: &Tensor,
    range: f64,
) -> Result<f64> {
    if recovered.shape() != ground_truth.shape() || recovered.shape() != visible.shape() {
        return Err(Error::ShapeMismatch("recovery_error: shapes differ".into()));
    }
    if range <= 0.0 {
        return Err(Error::Domain("recovery_error: range must be positive".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ((&r, &g), &v) in recovered.data().iter().zip(ground_truth.data()).zip(visible.data()) {
        if v == 0.0 {
            total += (r - g).abs() / range;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Domain("recovery_error over an empty occluded set".into()));
    }
    Ok(total / count as f64)
}

/// Range-relative recovery error for [-1, 1] data (range 2).
pub fn recovery_error(recovered: &Tensor, ground_truth: &Tensor, visible: &Tensor) -> Result<f64> {
    recovery_error_with_range(recovered, ground_truth, visible, 2.0)
}

/// Ground truth (evaluation only), per-image masks, and the mutable fill.
#[derive(Clone, Debug)]
pub struct IncompleteDataset {
    pub ground_truth: DataSet,
    pub masks: Vec<OcclusionMask>,
    pub fill: Tensor,
    /// `[n, ...signal]` stack of all visibility masks.
    pub visible: Tensor,
}

impl IncompleteDataset {
    /// Mask every image with an independent draw of `kind` and zero-fill the
    /// occluded pixels.
    pub fn new(ground_truth: DataSet, kind: &MaskKind, seeds: &SeedTree) -> Result<Self> {
        let n = ground_truth.len();
        if n == 0 {
            return Err(Error::Data("incomplete dataset needs at least one image".into()));
        }
        let signal = ground_truth.signal_shape().to_vec();
        let mut masks = Vec::with_capacity(n);
        let mut planes = Vec::with_capacity(n);
        for i in 0..n {
            let m = make_mask(kind, &signal, &mut seeds.stream("mask", &[i as u64]))?;
            planes.push(m.visible.clone());
            masks.push(m);
        }
        let visible = Tensor::stack(&planes)?;
        let fill = Tensor::zeros(ground_truth.examples.shape());
        Ok(IncompleteDataset { ground_truth, masks, fill, visible })
    }

    pub fn len(&self) -> usize {
        self.ground_truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ground_truth.is_empty()
    }

    /// Current training view: truth where visible, fill where occluded.
    pub fn composite(&self) -> Result<Tensor> {
        apply_fill(&self.ground_truth.examples, &self.visible, &self.fill)
    }

    /// Error of the current fill against the held-out truth.
    pub fn current_error(&self) -> Result<f64> {
        recovery_error(&self.fill, &self.ground_truth.examples, &self.visible)
    }

    /// Overwrite occluded pixels of the fill from a reconstruction batch.
    pub fn update_fill_from(&mut self, recon: &Tensor) -> Result<()> {
        if recon.shape() != self.fill.shape() {
            return Err(Error::ShapeMismatch("fill update: reconstruction shape".into()));
        }
        for ((f, &v), &r) in
            self.fill.data_mut().iter_mut().zip(self.visible.data()).zip(recon.data())
        {
            if v == 0.0 {
                *f = r;
            }
        }
        Ok(())
    }
}

/// Refresh the fill from mean-inference reconstructions of the composites.
pub fn recovery_update(ds: &mut IncompleteDataset, trainer: &Trainer) -> Result<()> {
    let composite = ds.composite()?;
    let n = ds.len();
    let chunk = 128;
    let mut recon = Tensor::zeros(composite.shape());
    let row_len: usize = composite.shape()[1..].iter().product();
    let mut i = 0;
    while i < n {
        let hi = (i + chunk).min(n);
        let idx: Vec<usize> = (i..hi).collect();
        let x = composite.gather_rows(&idx);
        let r = reconstruct_mean(&trainer.models.gen, &trainer.models.inf, &x)?;
        recon.data_mut()[i * row_len..hi * row_len].copy_from_slice(r.data());
        i = hi;
    }
    ds.update_fill_from(&recon)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryRow {
    pub update_index: u64,
    pub mask_kind: String,
    pub recovery_error: f64,
    pub baseline_error: f64,
}

pub fn recovery_csv(rows: &[RecoveryRow]) -> String {
    let mut out = String::from("update_index,mask_kind,recovery_error,baseline_error\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.update_index, r.mask_kind, r.recovery_error, r.baseline_error
        ));
    }
    out
}

pub struct RecoveryOutput {
    pub rows: Vec<RecoveryRow>,
    pub baseline_error: f64,
    pub final_error: f64,
}

/// Train on composites with the masked wake loss, refreshing the fill every
/// `interval_epochs` epochs, and log the error trace.
pub fn train_incomplete(
    trainer: &mut Trainer,
    ds: &mut IncompleteDataset,
    interval_epochs: u64,
    run_dir: Option<&Path>,
) -> Result<RecoveryOutput> {
    let mask_kind = ds.masks.first().map(|m| m.kind.label()).unwrap_or_default();
    let baseline = ds.current_error()?;
    let mut rows = vec![RecoveryRow {
        update_index: 0,
        mask_kind: mask_kind.clone(),
        recovery_error: baseline,
        baseline_error: baseline,
    }];

    if interval_epochs == 0 {
        return Err(Error::Config("recovery interval must be >= 1 epoch".into()));
    }
    let m = trainer.cfg.batch_data;
    let bpe = (ds.len() / m).max(1) as u64;
    let mut composite = ds.composite()?;
    let mut cur_epoch = u64::MAX;
    let mut batches = Vec::new();
    let mut update_index = 0u64;
    while trainer.iter < trainer.cfg.iterations {
        let t = trainer.iter;
        let epoch = t / bpe;
        if epoch != cur_epoch {
            batches = permutation_batches(ds.len(), m, &trainer.seeds, epoch)?;
            cur_epoch = epoch;
        }
        let idx = &batches[(t % bpe) as usize];
        let x = composite.gather_rows(idx);
        let vis = ds.visible.gather_rows(idx);
        trainer.train_iteration(&x, Some(&vis))?;

        // Fill refresh at epoch boundaries, on the configured cadence.
        let completed = trainer.iter / bpe;
        if completed > epoch && completed % interval_epochs == 0 {
            recovery_update(ds, trainer)?;
            composite = ds.composite()?;
            update_index += 1;
            let err = ds.current_error()?;
            rows.push(RecoveryRow {
                update_index,
                mask_kind: mask_kind.clone(),
                recovery_error: err,
                baseline_error: baseline,
            });
        }
    }

    let final_error = rows.last().map(|r| r.recovery_error).unwrap_or(baseline);
    if let Some(dir) = run_dir {
        atomic_write(&dir.join("recovery_trace.csv"), recovery_csv(&rows).as_bytes())?;
    }
    Ok(RecoveryOutput { rows, baseline_error: baseline, final_error })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_digits;
    use crate::models::ModelConfig;
    use crate::train::TrainConfig;

    #[test]
    fn mask_tags_parse_to_the_documented_kinds() {
        assert_eq!(MaskKind::parse_tag("P.5").unwrap(), MaskKind::SaltPepper { ratio: 0.5 });
        assert_eq!(MaskKind::parse_tag("P.7").unwrap(), MaskKind::SaltPepper { ratio: 0.7 });
        assert_eq!(
            MaskKind::parse_tag("MB10").unwrap(),
            MaskKind::MultiBlock { count: 10, size: 10 }
        );
        assert_eq!(MaskKind::parse_tag("B30").unwrap(), MaskKind::SingleBlock { size: 30 });
        assert!(MaskKind::parse_tag("B99x").is_err());
        let err = MaskKind::parse_tag("Q.5").unwrap_err().to_string();
        assert!(err.contains("P.5") && err.contains("B30"), "{err}");
    }

    #[test]
    fn salt_pepper_occludes_exactly_floor_ratio_pixels() {
        let seeds = SeedTree::new(1);
        let m = make_mask(
            &MaskKind::SaltPepper { ratio: 0.5 },
            &[1, 28, 28],
            &mut seeds.stream("m", &[0]),
        )
        .unwrap();
        assert_eq!(m.occluded_count(), 392); // floor(0.5 * 784)
    }

    #[test]
    fn blocks_occlude_expected_counts() {
        let seeds = SeedTree::new(2);
        let single = make_mask(
            &MaskKind::SingleBlock { size: 20 },
            &[1, 64, 64],
            &mut seeds.stream("m", &[0]),
        )
        .unwrap();
        assert_eq!(single.occluded_count(), 400);

        let multi = make_mask(
            &MaskKind::MultiBlock { count: 10, size: 10 },
            &[1, 64, 64],
            &mut seeds.stream("m", &[1]),
        )
        .unwrap();
        assert!(multi.occluded_count() <= 1000); // overlaps allowed
        assert!(multi.occluded_count() >= 100);

        assert!(make_mask(
            &MaskKind::SingleBlock { size: 99 },
            &[1, 28, 28],
            &mut seeds.stream("m", &[2])
        )
        .is_err());
    }

    #[test]
    fn masks_are_reproducible_and_channel_uniform() {
        let seeds = SeedTree::new(3);
        let a = make_mask(&MaskKind::SaltPepper { ratio: 0.3 }, &[2, 8, 8], &mut seeds.stream("m", &[7]))
            .unwrap();
        let b = make_mask(&MaskKind::SaltPepper { ratio: 0.3 }, &[2, 8, 8], &mut seeds.stream("m", &[7]))
            .unwrap();
        assert_eq!(a.visible, b.visible);
        assert_eq!(a.placement, b.placement);
        let (c0, c1) = a.visible.data().split_at(64);
        assert_eq!(c0, c1);
    }

    #[test]
    fn apply_fill_end_cases_and_idempotence() {
        let gt = Tensor::from_vec(vec![1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let fill = Tensor::full(&[1, 2, 2], 0.9);
        let all_visible = Tensor::full(&[1, 2, 2], 1.0);
        let none_visible = Tensor::zeros(&[1, 2, 2]);

        assert_eq!(apply_fill(&gt, &all_visible, &fill).unwrap(), gt);
        assert_eq!(apply_fill(&gt, &none_visible, &fill).unwrap(), fill);

        let half = Tensor::from_vec(vec![1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let once = apply_fill(&gt, &half, &fill).unwrap();
        let twice = apply_fill(&once, &half, &fill).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn recovery_error_reference_values_and_brute_force() {
        let gt = Tensor::from_vec(vec![1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let visible = Tensor::from_vec(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();

        assert_eq!(recovery_error(&gt, &gt, &visible).unwrap(), 0.0);

        // Constant offset 0.5 on occluded pixels, range 2 -> 0.25.
        let mut rec = gt.clone();
        rec.data_mut()[1] += 0.5;
        rec.data_mut()[2] += 0.5;
        assert!((recovery_error(&rec, &gt, &visible).unwrap() - 0.25).abs() < 1e-15);

        // Visible-pixel values are irrelevant.
        let mut rec2 = rec.clone();
        rec2.data_mut()[0] = 99.0;
        rec2.data_mut()[3] = -99.0;
        assert_eq!(
            recovery_error(&rec, &gt, &visible).unwrap(),
            recovery_error(&rec2, &gt, &visible).unwrap()
        );

        // Range-relative: scaling values and range together changes nothing.
        let scale = 3.0;
        let rec_s = rec.map(|v| v * scale);
        let gt_s = gt.map(|v| v * scale);
        let a = recovery_error_with_range(&rec, &gt, &visible, 2.0).unwrap();
        let b = recovery_error_with_range(&rec_s, &gt_s, &visible, 2.0 * scale).unwrap();
        assert!((a - b).abs() < 1e-15);

        // Independent scalar loop.
        let mut total = 0.0;
        let mut cnt = 0;
        for i in 0..4 {
            if visible.data()[i] == 0.0 {
                total += (rec.data()[i] - gt.data()[i]).abs() / 2.0;
                cnt += 1;
            }
        }
        assert!((recovery_error(&rec, &gt, &visible).unwrap() - total / cnt as f64).abs() < 1e-12);

        // Empty occluded set is an error.
        let all_visible = Tensor::full(&[1, 2, 2], 1.0);
        assert!(recovery_error(&gt, &gt, &all_visible).is_err());
    }

    #[test]
    fn zero_weight_models_leave_zero_fill_unchanged() {
        let seeds = SeedTree::new(4);
        let gt = synthetic_digits(6, 14, &mut seeds.stream("d", &[])).unwrap();
        let mut ds =
            IncompleteDataset::new(gt, &MaskKind::SaltPepper { ratio: 0.5 }, &seeds).unwrap();
        let cfg = TrainConfig { seed: 4, ..TrainConfig::default() };
        let mut trainer = Trainer::new(cfg, ModelConfig::conv14(2, 4)).unwrap();
        for i in 0..trainer.models.gen.params.len() {
            let z = Tensor::zeros(trainer.models.gen.params.value(i).shape());
            *trainer.models.gen.params.value_mut(i) = z;
        }
        recovery_update(&mut ds, &trainer).unwrap();
        assert!(ds.fill.data().iter().all(|&v| v == 0.0)); // tanh(0) = 0
    }

    #[test]
    fn perfect_stub_recovers_ground_truth_in_one_update() {
        let seeds = SeedTree::new(5);
        let gt = synthetic_digits(4, 14, &mut seeds.stream("d", &[])).unwrap();
        let mut ds =
            IncompleteDataset::new(gt.clone(), &MaskKind::SingleBlock { size: 5 }, &seeds).unwrap();
        ds.update_fill_from(&gt.examples.clone()).unwrap();
        assert!(ds.current_error().unwrap() < 1e-15);
        assert_eq!(ds.composite().unwrap(), gt.examples);
    }

    #[test]
    fn composites_preserve_visible_pixels_bitwise_during_training() {
        let seeds = SeedTree::new(6);
        let gt = synthetic_digits(8, 14, &mut seeds.stream("d", &[])).unwrap();
        let mut ds =
            IncompleteDataset::new(gt.clone(), &MaskKind::SaltPepper { ratio: 0.5 }, &seeds)
                .unwrap();
        let cfg = TrainConfig {
            iterations: 4,
            batch_data: 4,
            batch_gen: 4,
            seed: 6,
            log_interval: 2,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(cfg, ModelConfig::conv14(2, 4)).unwrap();
        let out = train_incomplete(&mut trainer, &mut ds, 1, None).unwrap();
        assert!(out.rows.len() >= 2); // baseline + at least one update
        let composite = ds.composite().unwrap();
        for (i, ((&c, &g), &v)) in composite
            .data()
            .iter()
            .zip(gt.examples.data())
            .zip(ds.visible.data())
            .enumerate()
        {
            if v == 1.0 {
                assert!(c == g, "visible pixel {i} changed");
            }
        }
    }

    #[test]
    fn zero_iterations_report_the_zero_fill_baseline() {
        let seeds = SeedTree::new(7);
        let gt = synthetic_digits(4, 14, &mut seeds.stream("d", &[])).unwrap();
        let mut ds =
            IncompleteDataset::new(gt, &MaskKind::SaltPepper { ratio: 0.5 }, &seeds).unwrap();
        let cfg = TrainConfig { iterations: 0, batch_data: 4, batch_gen: 4, seed: 7, ..TrainConfig::default() };
        let mut trainer = Trainer::new(cfg, ModelConfig::conv14(2, 4)).unwrap();
        let out = train_incomplete(&mut trainer, &mut ds, 1, None).unwrap();
        assert_eq!(out.final_error, out.baseline_error);
    }
}
