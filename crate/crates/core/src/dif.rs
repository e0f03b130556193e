//! Two-stage blended inpainting sampler.
//!
//! Local generation runs the first `ceil(λT)` reverse steps on a crop around
//! an enlarged rectangle `m′` of the user mask, so small regions get the
//! backbone's full working resolution. The result is pasted back and the
//! remaining steps harmonize it with its surroundings, blending against the
//! original free-form mask `m`.

use std::path::Path;

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::backbone::{forward_noise, Backbone, Conditioning, SamplerSchedule};
use crate::container::Tensor;
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, BoundingBox, ImageGrid, LatentGrid};
use crate::rng;

pub const DEFAULT_ENLARGE_RATIO: f64 = 0.2;

const LCG_NOISE_STREAM: u64 = 0;
const GCH_NOISE_STREAM: u64 = 1;

/// Region cropped for the harmonization stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GchScope {
    /// Enlarged box around `m`, resized to the working resolution.
    #[default]
    Crop,
    /// The whole frame, resized to the working resolution.
    Full,
}

#[derive(Debug, Clone)]
pub struct InpaintRequest {
    pub background: ImageGrid,
    pub mask: BinaryMask,
    pub conditioning: Conditioning,
    pub schedule: SamplerSchedule,
    pub seed: u64,
    pub enlarge_ratio: f64,
    pub gch_scope: GchScope,
}

impl InpaintRequest {
    pub fn new(
        background: ImageGrid,
        mask: BinaryMask,
        conditioning: Conditioning,
        schedule: SamplerSchedule,
        seed: u64,
    ) -> Self {
        Self {
            background,
            mask,
            conditioning,
            schedule,
            seed,
            enlarge_ratio: DEFAULT_ENLARGE_RATIO,
            gch_scope: GchScope::Crop,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mask.is_empty() {
            return Err(Error::EmptyMask);
        }
        let (h, w, _) = self.background.dims();
        if self.mask.dims() != (h, w) {
            return Err(Error::shape(&[h, w], &[self.mask.height(), self.mask.width()]));
        }
        check_ratio(self.enlarge_ratio)?;
        self.schedule.validate()
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio >= 0.0 && ratio.is_finite()) {
        return Err(Error::Config(format!(
            "enlarge ratio must be a nonnegative finite number, got {ratio}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Lcg,
    Gch,
    Single,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Lcg => "lcg",
            Stage::Gch => "gch",
            Stage::Single => "single",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTrace {
    pub stage: Stage,
    pub step_t: usize,
    pub blended_latent: LatentGrid,
}

/// Geometry needed to put a resized crop back where it came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub bbox: BoundingBox,
    pub image_size: (usize, usize),
    pub working_size: (usize, usize),
}

impl Placement {
    /// Working-resolution pixels per source pixel, `(vertical, horizontal)`.
    pub fn scale(&self) -> (f64, f64) {
        (
            self.working_size.0 as f64 / self.bbox.height() as f64,
            self.working_size.1 as f64 / self.bbox.width() as f64,
        )
    }

    pub fn is_identity(&self) -> bool {
        self.bbox == BoundingBox::full(self.image_size.0, self.image_size.1) && self.working_size == self.image_size
    }
}

/// Solid bounding box of `mask`, grown by `round(ratio · max(box_h, box_w))`
/// pixels per side and clipped to the image.
pub fn enlarge_mask(mask: &BinaryMask, ratio: f64) -> Result<BinaryMask> {
    check_ratio(ratio)?;
    let bbox = enlarged_box(mask, ratio)?;
    Ok(BinaryMask::from_box(mask.height(), mask.width(), &bbox))
}

pub fn enlarged_box(mask: &BinaryMask, ratio: f64) -> Result<BoundingBox> {
    let bbox = mask.bbox().ok_or(Error::EmptyMask)?;
    let pad = (ratio * bbox.height().max(bbox.width()) as f64).round() as usize;
    Ok(bbox.padded(pad, mask.height(), mask.width()))
}

/// Crops the bounding box of `region` and resizes it to `working`.
pub fn crop_region(image: &ImageGrid, region: &BinaryMask, working: (usize, usize)) -> Result<(ImageGrid, Placement)> {
    let (h, w, _) = image.dims();
    if region.dims() != (h, w) {
        return Err(Error::shape(&[h, w], &[region.height(), region.width()]));
    }
    let bbox = region.bbox().ok_or(Error::EmptyMask)?;
    let patch = image.crop(&bbox).resize(working.0, working.1);
    Ok((
        patch,
        Placement {
            bbox,
            image_size: (h, w),
            working_size: working,
        },
    ))
}

/// Resizes `patch` back to the recorded box and overwrites that box in a
/// copy of `background`.
pub fn repaste(patch: &ImageGrid, placement: &Placement, background: &ImageGrid) -> Result<ImageGrid> {
    let (h, w, c) = background.dims();
    if (h, w) != placement.image_size {
        return Err(Error::PlacementMismatch(format!(
            "placement recorded for {:?}, background is {:?}",
            placement.image_size,
            (h, w)
        )));
    }
    if (patch.height(), patch.width()) != placement.working_size || patch.channels() != c {
        return Err(Error::PlacementMismatch(format!(
            "patch is {:?}, placement expects {:?}x{c}",
            patch.dims(),
            placement.working_size
        )));
    }
    let b = placement.bbox;
    let restored = patch.resize(b.height(), b.width());
    let mut out = background.clone();
    out.paste(&restored, &b)?;
    Ok(out)
}

/// `z_denoised` where `region` is set, `z_reference` elsewhere.
pub fn blend(z_denoised: &LatentGrid, z_reference: &LatentGrid, region: &BinaryMask) -> Result<LatentGrid> {
    z_denoised.ensure_same_dims(z_reference)?;
    let (h, w, _) = z_denoised.dims();
    if region.dims() != (h, w) {
        return Err(Error::shape(&[h, w], &[region.height(), region.width()]));
    }
    let mut out = z_reference.clone();
    Zip::indexed(out.array_mut())
        .and(z_denoised.array())
        .for_each(|(y, x, _), o, &d| {
            if region.get(y, x) {
                *o = d;
            }
        });
    Ok(out)
}

fn stage_noise(latent: &LatentGrid, seed: u64, stream: u64) -> LatentGrid {
    let (h, w, c) = latent.dims();
    rng::normal_latent(&mut rng::seeded(seed, stream), h, w, c)
}

/// Runs reverse steps `start-1, …, end` with blending against the forward-noised
/// `reference`. Returns the last blended latent and the blended clean estimate.
#[allow(clippy::too_many_arguments)]
fn blended_loop(
    backbone: &dyn Backbone,
    reference: &LatentGrid,
    region: &BinaryMask,
    cond: &Conditioning,
    schedule: &SamplerSchedule,
    start: usize,
    end: usize,
    noise: &LatentGrid,
    stage: Stage,
    trace: &mut Vec<StageTrace>,
) -> Result<(LatentGrid, LatentGrid)> {
    let mut z = forward_noise(reference, start, noise, schedule)?;
    let mut clean = reference.clone();
    for t in (end..start).rev() {
        let out = backbone.predict_step(&z, cond, t, schedule)?;
        let reference_t = forward_noise(reference, t, noise, schedule)?;
        z = blend(&out.latent, &reference_t, region)?;
        clean = blend(&out.clean_estimate, reference, region)?;
        trace.push(StageTrace {
            stage,
            step_t: t,
            blended_latent: z.clone(),
        });
    }
    Ok((z, clean))
}

fn latent_region(mask: &BinaryMask, bbox: &BoundingBox, latent: &LatentGrid) -> BinaryMask {
    mask.crop(bbox).resize_nearest(latent.height(), latent.width())
}

#[derive(Debug, Clone)]
pub struct LcgOutput {
    /// Local patch `x̂^L` at working resolution.
    pub patch: ImageGrid,
    pub placement: Placement,
    pub trace: Vec<StageTrace>,
}

/// Local generation on the enlarged crop.
///
/// The patch handed to the next stage is the decoded clean estimate of the
/// last step, blended with the clean crop latent outside `m′`.
pub fn run_lcg(backbone: &dyn Backbone, request: &InpaintRequest) -> Result<LcgOutput> {
    request.validate()?;
    let enlarged = enlarge_mask(&request.mask, request.enlarge_ratio)?;
    let (crop, placement) = crop_region(&request.background, &enlarged, backbone.working_size())?;
    let z_l = backbone.encode(&crop)?;
    let region = latent_region(&enlarged, &placement.bbox, &z_l);
    let schedule = &request.schedule;
    let steps = schedule.lcg_steps();
    let mut trace = Vec::with_capacity(steps);
    let final_clean = if steps == 0 {
        z_l
    } else {
        let noise = stage_noise(&z_l, request.seed, LCG_NOISE_STREAM);
        let top = schedule.steps();
        blended_loop(
            backbone,
            &z_l,
            &region,
            &request.conditioning,
            schedule,
            top,
            top - steps,
            &noise,
            Stage::Lcg,
            &mut trace,
        )?
        .1
    };
    Ok(LcgOutput {
        patch: backbone.decode(&final_clean)?,
        placement,
        trace,
    })
}

/// Harmonization over the remaining steps on the repasted image `x_g`,
/// blending against the original mask.
pub fn run_gch(
    backbone: &dyn Backbone,
    x_g: &ImageGrid,
    request: &InpaintRequest,
    trace: &mut Vec<StageTrace>,
) -> Result<ImageGrid> {
    request.validate()?;
    let steps = request.schedule.gch_steps();
    if steps == 0 {
        return Ok(x_g.clone());
    }
    let (h, w, _) = x_g.dims();
    let crop_mask = match request.gch_scope {
        GchScope::Crop => enlarge_mask(&request.mask, request.enlarge_ratio)?,
        GchScope::Full => BinaryMask::full(h, w),
    };
    let (crop, placement) = crop_region(x_g, &crop_mask, backbone.working_size())?;
    let z_g = backbone.encode(&crop)?;
    let region = latent_region(&request.mask, &placement.bbox, &z_g);
    let noise = stage_noise(&z_g, request.seed, GCH_NOISE_STREAM);
    let (z0, _) = blended_loop(
        backbone,
        &z_g,
        &region,
        &request.conditioning,
        &request.schedule,
        steps,
        0,
        &noise,
        Stage::Gch,
        trace,
    )?;
    repaste(&backbone.decode(&z0)?, &placement, x_g)
}

/// Full two-stage pipeline with the per-step blended latents of both stages.
pub fn inpaint_traced(backbone: &dyn Backbone, request: &InpaintRequest) -> Result<(ImageGrid, Vec<StageTrace>)> {
    let lcg = run_lcg(backbone, request)?;
    let x_g = repaste(&lcg.patch, &lcg.placement, &request.background)?;
    let mut trace = lcg.trace;
    let out = run_gch(backbone, &x_g, request, &mut trace)?;
    Ok((out, trace))
}

pub fn inpaint(backbone: &dyn Backbone, request: &InpaintRequest) -> Result<ImageGrid> {
    inpaint_traced(backbone, request).map(|(img, _)| img)
}

/// Single-stage blended sampling over all `T` steps on the full frame at its
/// native resolution, blending against `m`. This is the sampler without the
/// local/global split.
pub fn inpaint_single_stage_traced(
    backbone: &dyn Backbone,
    request: &InpaintRequest,
) -> Result<(ImageGrid, Vec<StageTrace>)> {
    request.validate()?;
    let z = backbone.encode(&request.background)?;
    let region = request.mask.resize_nearest(z.height(), z.width());
    let noise = stage_noise(&z, request.seed, LCG_NOISE_STREAM);
    let steps = request.schedule.steps();
    let mut trace = Vec::with_capacity(steps);
    let (z0, _) = blended_loop(
        backbone,
        &z,
        &region,
        &request.conditioning,
        &request.schedule,
        steps,
        0,
        &noise,
        Stage::Single,
        &mut trace,
    )?;
    Ok((backbone.decode(&z0)?, trace))
}

pub fn inpaint_single_stage(backbone: &dyn Backbone, request: &InpaintRequest) -> Result<ImageGrid> {
    inpaint_single_stage_traced(backbone, request).map(|(img, _)| img)
}

/// Unconstrained generation: single-stage sampling of a mid-gray canvas under
/// a full mask.
pub fn generate(
    backbone: &dyn Backbone,
    conditioning: &Conditioning,
    size: (usize, usize),
    schedule: &SamplerSchedule,
    seed: u64,
) -> Result<ImageGrid> {
    let request = InpaintRequest::new(
        ImageGrid::filled(size.0, size.1, 3, 0.5),
        BinaryMask::full(size.0, size.1),
        conditioning.clone(),
        schedule.clone(),
        seed,
    );
    inpaint_single_stage(backbone, &request)
}

/// Applies the requests in order, each on the previous result. The
/// `background` of every request is replaced by the running image.
pub fn inpaint_multi<'a>(
    background: &ImageGrid,
    requests: impl IntoIterator<Item = (&'a dyn Backbone, InpaintRequest)>,
) -> Result<ImageGrid> {
    let mut current = background.clone();
    for (index, (backbone, mut request)) in requests.into_iter().enumerate() {
        request.background = current;
        current = inpaint(backbone, &request).map_err(|e| Error::RequestFailed {
            index,
            source: Box::new(e),
        })?;
    }
    Ok(current)
}

/// Writes each traced latent as `<stage>-<step>.dmlt` under `dir`.
pub fn dump_trace(trace: &[StageTrace], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for entry in trace {
        let path = dir.join(format!("{}-{:03}.dmlt", entry.stage.name(), entry.step_t));
        Tensor::from(&entry.blended_latent).save(path)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{CountingBackbone, OracleBackbone, SolidColorBackbone, ToyBackbone};
    use crate::text::TextEncoder;
    use proptest::prelude::*;

    fn square_mask(h: usize, w: usize, top: usize, left: usize, side: usize) -> BinaryMask {
        BinaryMask::from_box(h, w, &BoundingBox::new(top, left, top + side, left + side))
    }

    fn request(backbone: &dyn Backbone, bg: ImageGrid, mask: BinaryMask, lambda: f64, seed: u64) -> InpaintRequest {
        let cond = Conditioning::new(backbone.encode_text("a red [sks] teapot").unwrap(), 1.0).unwrap();
        let schedule = SamplerSchedule::linear(10, lambda, 0.1).unwrap();
        InpaintRequest::new(bg, mask, cond, schedule, seed)
    }

    fn textured(h: usize, w: usize) -> ImageGrid {
        ImageGrid::from_fn(h, w, 3, |(y, x, k)| ((y * 7 + x * 3 + k * 11) % 17) as f64 / 16.0)
    }

    #[test]
    fn enlarge_geometry() {
        let m = square_mask(64, 64, 27, 27, 10);
        let e = enlarge_mask(&m, 0.2).unwrap();
        assert_eq!(e.bbox().unwrap(), BoundingBox::new(25, 25, 39, 39));
        assert_eq!(enlarge_mask(&m, 0.0).unwrap(), m);
        let edge = square_mask(64, 64, 0, 58, 6);
        assert_eq!(
            enlarge_mask(&edge, 0.5).unwrap().bbox().unwrap(),
            BoundingBox::new(0, 55, 9, 64)
        );
        assert!(matches!(
            enlarge_mask(&BinaryMask::empty(4, 4), 0.2),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn crop_full_frame_and_scale() {
        let img = textured(16, 16);
        let (patch, placement) = crop_region(&img, &BinaryMask::full(16, 16), (16, 16)).unwrap();
        assert_eq!(patch, img);
        assert!(placement.is_identity());
        let (_, p) = crop_region(&textured(64, 64), &square_mask(64, 64, 8, 8, 16), (64, 64)).unwrap();
        assert_eq!(p.scale(), (4.0, 4.0));
    }

    #[test]
    fn repaste_round_trip_and_locality() {
        let img = textured(32, 32);
        let m = square_mask(32, 32, 9, 9, 14);
        let (patch, placement) = crop_region(&img, &m, (14, 14)).unwrap();
        assert_eq!(repaste(&patch, &placement, &img).unwrap(), img);
        let modified = ImageGrid::filled(14, 14, 3, 1.0);
        let out = repaste(&modified, &placement, &img).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                for k in 0..3 {
                    let inside = placement.bbox.contains(y, x);
                    let same = out.array()[[y, x, k]] == img.array()[[y, x, k]];
                    assert!(inside || same);
                }
            }
        }
        let (full_patch, full) = crop_region(&img, &BinaryMask::full(32, 32), (32, 32)).unwrap();
        let other = ImageGrid::filled(32, 32, 3, 0.25);
        assert_eq!(repaste(&other, &full, &img).unwrap(), other);
        assert_eq!(full_patch, img);
        assert!(matches!(
            repaste(&patch, &placement, &textured(16, 16)),
            Err(Error::PlacementMismatch(_))
        ));
    }

    #[test]
    fn blend_edges() {
        let mut r = rng::seeded(2, 0);
        let a = rng::normal_latent(&mut r, 5, 6, 3);
        let b = rng::normal_latent(&mut r, 5, 6, 3);
        assert_eq!(blend(&a, &b, &BinaryMask::full(5, 6)).unwrap(), a);
        assert_eq!(blend(&a, &b, &BinaryMask::empty(5, 6)).unwrap(), b);
        assert!(blend(&a, &b, &BinaryMask::full(5, 5)).is_err());
    }

    #[test]
    fn step_counts_follow_lambda() {
        let toy = CountingBackbone::new(ToyBackbone::new("toy", 1, (8, 8)));
        let bg = textured(24, 24);
        let m = square_mask(24, 24, 8, 8, 6);
        for (lambda, lcg) in [(0.0, 0), (0.7, 7), (1.0, 10), (0.05, 1)] {
            toy.reset();
            let (_, trace) = inpaint_traced(&toy, &request(&toy, bg.clone(), m.clone(), lambda, 1)).unwrap();
            assert_eq!(toy.step_calls(), 10);
            assert_eq!(trace.iter().filter(|t| t.stage == Stage::Lcg).count(), lcg);
            assert_eq!(trace.iter().filter(|t| t.stage == Stage::Gch).count(), 10 - lcg);
            let seen = toy.steps_seen();
            assert_eq!(&seen[..lcg], &(10 - lcg..10).rev().collect::<Vec<_>>()[..]);
            assert_eq!(&seen[lcg..], &(0..10 - lcg).rev().collect::<Vec<_>>()[..]);
        }
    }

    #[test]
    fn lambda_one_returns_repasted_local_result() {
        let toy = ToyBackbone::new("toy", 1, (8, 8));
        let bg = textured(24, 24);
        let req = request(&toy, bg.clone(), square_mask(24, 24, 8, 8, 6), 1.0, 3);
        let lcg = run_lcg(&toy, &req).unwrap();
        let x_g = repaste(&lcg.patch, &lcg.placement, &bg).unwrap();
        assert_eq!(inpaint(&toy, &req).unwrap(), x_g);
    }

    #[test]
    fn lambda_zero_patch_is_decoded_crop() {
        let toy = ToyBackbone::new("toy", 1, (8, 8));
        let bg = textured(24, 24);
        let req = request(&toy, bg.clone(), square_mask(24, 24, 8, 8, 6), 0.0, 3);
        let lcg = run_lcg(&toy, &req).unwrap();
        let (crop, _) = crop_region(&bg, &enlarge_mask(&req.mask, 0.2).unwrap(), (8, 8)).unwrap();
        assert_eq!(lcg.patch, toy.decode(&toy.encode(&crop).unwrap()).unwrap());
        assert!(lcg.trace.is_empty());
    }

    #[test]
    fn lcg_trace_has_one_entry_per_step() {
        let toy = ToyBackbone::new("toy", 1, (10, 10));
        let bg = textured(10, 10);
        let req = request(&toy, bg, square_mask(10, 10, 3, 3, 4), 0.7, 5);
        let lcg = run_lcg(&toy, &req).unwrap();
        assert_eq!(lcg.trace.len(), 7);
        assert!(lcg.trace.iter().all(|t| t.blended_latent.is_finite()));
    }

    #[test]
    fn background_preserved_outside_enlarged_region() {
        let toy = ToyBackbone::new("toy", 1, (8, 8));
        let bg = textured(32, 32);
        let m = square_mask(32, 32, 11, 5, 7);
        let out = inpaint(&toy, &request(&toy, bg.clone(), m.clone(), 0.7, 9)).unwrap();
        let outer = enlarge_mask(&m, 0.2).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                if !outer.get(y, x) {
                    for k in 0..3 {
                        assert_eq!(out.array()[[y, x, k]], bg.array()[[y, x, k]]);
                    }
                }
            }
        }
        assert_ne!(out, bg);
    }

    #[test]
    fn oracle_pipeline_with_matching_geometry_recovers_target() {
        // With the working size equal to a full-frame crop the oracle drives
        // the masked region to its clean target.
        let target = LatentGrid::filled(12, 12, 3, 0.8);
        let oracle = OracleBackbone::new(target);
        let bg = ImageGrid::filled(12, 12, 3, 0.2);
        let cond = Conditioning::new(oracle.encode_text("x").unwrap(), 1.0).unwrap();
        let schedule = SamplerSchedule::linear(10, 0.7, 0.1).unwrap();
        let mut req = InpaintRequest::new(bg, BinaryMask::full(12, 12), cond, schedule, 0);
        req.enlarge_ratio = 0.0;
        let out = inpaint(&oracle, &req).unwrap();
        assert!(out.array().iter().all(|v| (v - 0.8).abs() < 1e-9));
    }

    #[test]
    fn solid_color_fills_only_near_the_mask() {
        let solid = SolidColorBackbone::new([1.0, 0.0, 0.0], (8, 8));
        let bg = ImageGrid::filled(32, 32, 3, 0.5);
        let m = square_mask(32, 32, 12, 12, 8);
        let out = inpaint(&solid, &request(&solid, bg.clone(), m, 0.7, 1)).unwrap();
        let centre = out.array()[[16, 16, 0]];
        assert!((centre - 1.0).abs() < 1e-9, "centre red {centre}");
        assert_eq!(out.array()[[0, 0, 0]], 0.5);
    }

    #[test]
    fn determinism_and_empty_mask() {
        let toy = ToyBackbone::new("toy", 1, (8, 8));
        let bg = textured(24, 24);
        let req = request(&toy, bg.clone(), square_mask(24, 24, 4, 4, 6), 0.7, 11);
        assert_eq!(inpaint(&toy, &req).unwrap(), inpaint(&toy, &req).unwrap());
        let bad = request(&toy, bg, BinaryMask::empty(24, 24), 0.7, 11);
        assert!(matches!(inpaint(&toy, &bad), Err(Error::EmptyMask)));
    }

    #[test]
    fn multi_request_fold() {
        let toy = ToyBackbone::new("toy", 1, (8, 8));
        let bg = textured(40, 40);
        let m1 = square_mask(40, 40, 2, 2, 8);
        let m2 = square_mask(40, 40, 26, 26, 8);
        let r1 = request(&toy, bg.clone(), m1.clone(), 0.7, 1);
        let r2 = request(&toy, bg.clone(), m2.clone(), 0.7, 2);
        let b: &dyn Backbone = &toy;
        assert_eq!(inpaint_multi(&bg, Vec::new()).unwrap(), bg);
        let single = inpaint_multi(&bg, vec![(b, r1.clone())]).unwrap();
        assert_eq!(single, inpaint(&toy, &r1).unwrap());
        let both = inpaint_multi(&bg, vec![(b, r1), (b, r2)]).unwrap();
        let outer2 = enlarge_mask(&m2, 0.2).unwrap();
        let first = m1.bbox().unwrap();
        for y in first.top..first.bottom {
            for x in first.left..first.right {
                assert!(!outer2.get(y, x));
                for k in 0..3 {
                    assert_eq!(both.array()[[y, x, k]], single.array()[[y, x, k]]);
                }
            }
        }
        let bad = request(&toy, bg.clone(), BinaryMask::empty(40, 40), 0.7, 3);
        let err = inpaint_multi(&bg, vec![(b, request(&toy, bg.clone(), m1, 0.7, 1)), (b, bad)]).unwrap_err();
        assert!(matches!(err, Error::RequestFailed { index: 1, .. }));
    }

    #[test]
    fn single_stage_preserves_outside_mask() {
        let toy = ToyBackbone::new("toy", 1, (8, 8));
        let bg = textured(16, 16);
        let m = square_mask(16, 16, 4, 4, 5);
        let (out, trace) = inpaint_single_stage_traced(&toy, &request(&toy, bg.clone(), m.clone(), 0.7, 4)).unwrap();
        assert_eq!(trace.len(), 10);
        for y in 0..16 {
            for x in 0..16 {
                if !m.get(y, x) {
                    assert_eq!(out.array()[[y, x, 1]], bg.array()[[y, x, 1]]);
                }
            }
        }
    }

    #[test]
    fn trace_dump_writes_one_file_per_step() {
        let toy = ToyBackbone::new("toy", 1, (8, 8));
        let (_, trace) = inpaint_traced(
            &toy,
            &request(&toy, textured(16, 16), square_mask(16, 16, 4, 4, 5), 0.7, 4),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        dump_trace(&trace, dir.path()).unwrap();
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 10);
        let t = Tensor::load(dir.path().join("lcg-003.dmlt")).unwrap();
        assert_eq!(t.dims, vec![8, 8, 3]);
    }

    proptest! {
        #[test]
        fn blend_is_elementwise_select(seed in any::<u64>(), h in 1usize..6, w in 1usize..6) {
            let mut r = rng::seeded(seed, 0);
            let a = rng::normal_latent(&mut r, h, w, 2);
            let b = rng::normal_latent(&mut r, h, w, 2);
            let m = BinaryMask::from_fn(h, w, |(y, x)| (y * 31 + x * 17 + seed as usize).is_multiple_of(3));
            let out = blend(&a, &b, &m).unwrap();
            for ((y, x, k), v) in out.array().indexed_iter() {
                let expect = if m.get(y, x) { a.array()[[y, x, k]] } else { b.array()[[y, x, k]] };
                prop_assert_eq!(v.to_bits(), expect.to_bits());
            }
        }

        #[test]
        fn enlarged_masks_nest(
            top in 0usize..30, left in 0usize..30, bh in 1usize..20, bw in 1usize..20,
            r1 in 0.0f64..1.0, dr in 0.0f64..1.0,
        ) {
            let m = BinaryMask::from_box(48, 48, &BoundingBox::new(top, left, top + bh, left + bw));
            let a = enlarge_mask(&m, r1).unwrap();
            let b = enlarge_mask(&m, r1 + dr).unwrap();
            prop_assert!(m.is_subset_of(&a));
            prop_assert!(a.is_subset_of(&b));
        }
    }
}
