//! Per-sequence orchestration: Lab conversion and illuminant invariance,
//! IPM warp, lane feature extraction and fitting, GMM segmentation and
//! boundary, detection, optical-flow mobility and departure, GPS fusion,
//! and overlay rendering.
//!
//! Frames are processed in order (flow and GPS smoothing are sequential by
//! nature); the heavy stages parallelize internally via rayon, so the
//! thread-pool size bounds total parallelism.

pub mod overlay;

use std::collections::HashSet;
use std::path::Path;

use crate::detect::{
    assign_lane, build_pyramid, score_and_detect, Detection, DetectorModel,
};
use crate::imgcore::ImageF;
use crate::ipm::{pixel_to_ground, warp_to_ground, CameraRig, GroundGrid, WarpParams};
use crate::lanefeat::{
    build_bank, extract_features, illum_invariant_channel, SteerableBank,
};
use crate::lanefit::{
    assemble_lanes, cluster_columns, departure_angle, interpolate_gaps, ransac_fit,
    DepartureState, FitParams, LaneSet,
};
use crate::motion::{
    fuse, lk_flow, mobility, BoundarySummary, CurveRecord, DetectionRecord, FlowField,
    FlowParams, FramePosition, GpsSample, GpsSmoother, LaneSummary, MobilityThresholds,
};
use crate::roadseg::{
    em_refine, extract_boundary, init_from_priors, segment_grid, vanishing_point_extend,
    CellLabel, ClassStats, GmmModel, RoadLabelMap,
};
use crate::synthbench::PipelineFrameOutput;

/// All tunable pipeline parameters with their defaults. Key names match the
/// config-file keys accepted by [`PipelineConfig::apply_override`].
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub steerable_sigma: f64,
    pub feature_k: f64,
    pub ransac_iters: usize,
    pub ransac_tol_m: f64,
    pub ransac_seed: u64,
    pub max_lanes: usize,
    pub pin_cubic_to_parabola: bool,
    pub min_lane_separation_m: f64,
    pub min_support: usize,
    /// Road-geometry plausibility bounds on accepted curves.
    pub max_heading_a: f64,
    pub max_curvature_b: f64,
    pub max_cubic_c: f64,
    pub ipm_resolution_m: f64,
    pub ipm_y_halfwidth_m: f64,
    pub ipm_range_m: f64,
    pub em_per_frame: bool,
    pub em_max_iters: usize,
    pub em_tol: f64,
    pub em_sample_frames: usize,
    pub det_threshold: Option<f32>,
    pub pyramid_interval: usize,
    pub flow_levels: usize,
    pub flow_window: usize,
    pub flow_stride_px: usize,
    pub mobility_static_px: f32,
    pub mobility_moving_px: f32,
    pub gps_ema_beta: f64,
    pub frame_dt_s: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            steerable_sigma: 1.0,
            feature_k: 2.0,
            ransac_iters: 500,
            ransac_tol_m: 0.15,
            ransac_seed: 7,
            max_lanes: 8,
            pin_cubic_to_parabola: false,
            min_lane_separation_m: 1.2,
            // Tuned on the synthetic corpora at 0.1 m grid resolution: real
            // lane groups carry hundreds of cells, noise clusters a few dozen.
            min_support: 40,
            max_heading_a: 0.3,
            max_curvature_b: 0.005,
            max_cubic_c: 5e-4,
            ipm_resolution_m: 0.1,
            ipm_y_halfwidth_m: 12.0,
            ipm_range_m: 45.0,
            em_per_frame: false,
            em_max_iters: 30,
            em_tol: 1e-4,
            em_sample_frames: 10,
            det_threshold: None,
            pyramid_interval: 8,
            flow_levels: 3,
            flow_window: 15,
            flow_stride_px: 10,
            mobility_static_px: 0.5,
            mobility_moving_px: 1.5,
            gps_ema_beta: 0.8,
            frame_dt_s: 0.1,
        }
    }
}

impl PipelineConfig {
    /// Apply one `key=value` override; unknown keys are rejected.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<(), String> {
        let bad = |what: &str| format!("key {key}: bad {what} {value:?}");
        macro_rules! parse {
            ($t:ty, $what:expr) => {
                value.parse::<$t>().map_err(|_| bad($what))?
            };
        }
        match key {
            "steerable_sigma" => self.steerable_sigma = parse!(f64, "number"),
            "feature_k" => self.feature_k = parse!(f64, "number"),
            "ransac_iters" => self.ransac_iters = parse!(usize, "integer"),
            "ransac_tol_m" => self.ransac_tol_m = parse!(f64, "number"),
            "ransac_seed" => self.ransac_seed = parse!(u64, "integer"),
            "max_lanes" => self.max_lanes = parse!(usize, "integer"),
            "pin_cubic_to_parabola" => self.pin_cubic_to_parabola = parse!(bool, "bool"),
            "min_lane_separation_m" => self.min_lane_separation_m = parse!(f64, "number"),
            "min_support" => self.min_support = parse!(usize, "integer"),
            "max_heading_a" => self.max_heading_a = parse!(f64, "number"),
            "max_curvature_b" => self.max_curvature_b = parse!(f64, "number"),
            "max_cubic_c" => self.max_cubic_c = parse!(f64, "number"),
            "ipm_resolution_m" => self.ipm_resolution_m = parse!(f64, "number"),
            "ipm_y_halfwidth_m" => self.ipm_y_halfwidth_m = parse!(f64, "number"),
            "ipm_range_m" => self.ipm_range_m = parse!(f64, "number"),
            "em_per_frame" => self.em_per_frame = parse!(bool, "bool"),
            "em_max_iters" => self.em_max_iters = parse!(usize, "integer"),
            "em_tol" => self.em_tol = parse!(f64, "number"),
            "em_sample_frames" => self.em_sample_frames = parse!(usize, "integer"),
            "det_threshold" => self.det_threshold = Some(parse!(f32, "number")),
            "pyramid_interval" => self.pyramid_interval = parse!(usize, "integer"),
            "flow_levels" => self.flow_levels = parse!(usize, "integer"),
            "flow_window" => self.flow_window = parse!(usize, "integer"),
            "flow_stride_px" => self.flow_stride_px = parse!(usize, "integer"),
            "mobility_static_px" => self.mobility_static_px = parse!(f32, "number"),
            "mobility_moving_px" => self.mobility_moving_px = parse!(f32, "number"),
            "gps_ema_beta" => self.gps_ema_beta = parse!(f64, "number"),
            "frame_dt_s" => self.frame_dt_s = parse!(f64, "number"),
            other => return Err(format!("unknown config key {other:?}")),
        }
        Ok(())
    }

    /// Load `key = value` overrides from a config file (strict parsing).
    pub fn apply_config_file(&mut self, path: &Path) -> Result<(), String> {
        let text =
            std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut seen = HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value", lineno + 1))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(format!("duplicate key {key}"));
            }
            self.apply_override(key, value.trim())?;
        }
        Ok(())
    }
}

/// Everything one frame produces: the serializable record, the rich in-memory
/// outputs used by the benchmark, and optionally an overlay image.
#[derive(Debug)]
pub struct FrameResult {
    pub position: FramePosition,
    pub output: PipelineFrameOutput,
    pub detections: Vec<Detection>,
    pub overlay: Option<ImageF>,
}

/// Sequential per-sequence pipeline with internal parallelism.
pub struct Pipeline {
    rig: CameraRig,
    cfg: PipelineConfig,
    bank: SteerableBank,
    warp: WarpParams,
    gmm_seed: [ClassStats; 3],
    gmm: Option<GmmModel>,
    detector: Option<DetectorModel>,
    smoother: GpsSmoother,
    prev_luma: Option<ImageF>,
    pub render_overlays: bool,
}

// Derive a per-frame, per-group RANSAC seed so results do not depend on
// processing order.
fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut h = seed ^ a.wrapping_mul(0x9E3779B97F4A7C15) ^ b.wrapping_mul(0xC2B2AE3D27D4EB4F);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51AFD7ED558CCD);
    h ^= h >> 33;
    h
}

impl Pipeline {
    pub fn new(
        rig: CameraRig,
        cfg: PipelineConfig,
        gmm_seed: [ClassStats; 3],
        detector: Option<DetectorModel>,
    ) -> Self {
        let bank = build_bank(cfg.steerable_sigma);
        let warp = WarpParams {
            x_min: None,
            x_max: cfg.ipm_range_m,
            y_halfwidth: cfg.ipm_y_halfwidth_m,
            resolution: cfg.ipm_resolution_m,
        };
        let smoother = GpsSmoother::new(cfg.gps_ema_beta);
        Self {
            rig,
            cfg,
            bank,
            warp,
            gmm_seed,
            gmm: None,
            detector,
            smoother,
            prev_luma: None,
            render_overlays: true,
        }
    }

    pub fn rig(&self) -> &CameraRig {
        &self.rig
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    fn lab_of(&self, img: &ImageF) -> ImageF {
        if img.channels() == 3 {
            crate::imgcore::rgb_to_lab(img).expect("3 channels")
        } else {
            // Grayscale input: replicate into RGB first.
            let mut rgb = ImageF::new(img.width(), img.height(), 3);
            for y in 0..img.height() {
                for x in 0..img.width() {
                    let v = img.get(x, y, 0);
                    for c in 0..3 {
                        rgb.set(x, y, c, v);
                    }
                }
            }
            crate::imgcore::rgb_to_lab(&rgb).expect("3 channels")
        }
    }

    fn lab_samples_of_grid(grid: &GroundGrid, stride: usize) -> Vec<[f64; 3]> {
        let mut samples = Vec::new();
        let mut r = 0;
        while r < grid.rows() {
            let mut c = 0;
            while c < grid.cols() {
                if grid.valid(r, c) {
                    samples.push([
                        grid.cells.get(c, r, 0) as f64,
                        grid.cells.get(c, r, 1) as f64,
                        grid.cells.get(c, r, 2) as f64,
                    ]);
                }
                c += stride;
            }
            r += stride;
        }
        samples
    }

    /// Fit the sequence-level GMM from a sample of frames (typically the
    /// first ten). Without this call the model is fitted lazily from the
    /// first processed frame.
    pub fn fit_gmm(&mut self, sample_frames: &[ImageF]) {
        let mut samples = Vec::new();
        for img in sample_frames.iter().take(self.cfg.em_sample_frames) {
            let lab = self.lab_of(img);
            let grid = warp_to_ground(&self.rig, &lab, &self.warp);
            samples.extend(Self::lab_samples_of_grid(&grid, 3));
        }
        self.gmm = self.refine_from_samples(&samples);
    }

    fn refine_from_samples(&self, samples: &[[f64; 3]]) -> Option<GmmModel> {
        let model = init_from_priors(self.gmm_seed).ok()?;
        match em_refine(&model, samples, self.cfg.em_max_iters, self.cfg.em_tol) {
            Ok(m) => Some(m),
            Err(e) => {
                log::warn!("GMM refinement failed: {e}; using seed statistics");
                Some(model)
            }
        }
    }

    /// Run the full pipeline on one frame. `img` may be RGB or grayscale in
    /// `[0,1]`. Per-frame algorithmic failures land in the diagnostics.
    pub fn process_frame(
        &mut self,
        frame_id: u64,
        img: &ImageF,
        gps: Option<&GpsSample>,
    ) -> FrameResult {
        let mut diagnostics = Vec::new();
        let timestamp_s = frame_id as f64 * self.cfg.frame_dt_s;

        // Color and illumination-invariant channels.
        let lab = self.lab_of(img);
        let luma = lab.channel(0);
        let invariant = match illum_invariant_channel(&lab) {
            Ok(ch) => ch,
            Err(e) => {
                diagnostics.push(format!("invariant channel: {e}"));
                luma.clone()
            }
        };

        // Bird's-eye grids.
        let grid_inv = warp_to_ground(&self.rig, &invariant, &self.warp);
        let grid_lab = warp_to_ground(&self.rig, &lab, &self.warp);

        // Lane features and fitting.
        let lanes: Option<LaneSet> = match extract_features(&grid_inv, &self.bank, self.cfg.feature_k)
        {
            Err(e) => {
                diagnostics.push(format!("lane features: {e}"));
                None
            }
            Ok(mask) => {
                let groups = cluster_columns(&mask, self.cfg.max_lanes);
                let mut curves = Vec::new();
                for (gi, group) in groups.iter().enumerate() {
                    // A lane observed over less than the interpolation span
                    // cannot be fitted meaningfully.
                    let x_lo = group.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
                    let x_hi = group.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
                    if x_hi - x_lo < 5.0 {
                        continue;
                    }
                    let dense = interpolate_gaps(group);
                    let params = FitParams {
                        iters: self.cfg.ransac_iters,
                        tol_m: self.cfg.ransac_tol_m,
                        seed: mix_seed(self.cfg.ransac_seed, frame_id, gi as u64),
                        pin_parabola: self.cfg.pin_cubic_to_parabola,
                        min_support: self.cfg.min_support,
                    };
                    match ransac_fit(&dense, &params) {
                        Ok(curve) => {
                            // Road-model plausibility: reject geometry no
                            // real lane can have (noise clusters fit wild
                            // cubics over short spans).
                            if curve.a.abs() <= self.cfg.max_heading_a
                                && curve.b.abs() <= self.cfg.max_curvature_b
                                && curve.c.abs() <= self.cfg.max_cubic_c
                            {
                                curves.push(curve);
                            } else {
                                log::debug!(
                                    "frame {frame_id} group {gi}: implausible curve rejected \
                                     (a={:.3}, b={:.5}, c={:.7})",
                                    curve.a,
                                    curve.b,
                                    curve.c
                                );
                            }
                        }
                        Err(e) => log::debug!("frame {frame_id} group {gi}: {e}"),
                    }
                }
                match assemble_lanes(curves, self.cfg.max_lanes, self.cfg.min_lane_separation_m) {
                    Ok(set) => Some(set),
                    Err(e) => {
                        diagnostics.push(format!("lane assembly: {e}"));
                        None
                    }
                }
            }
        };

        // Segmentation and boundary.
        if self.gmm.is_none() || self.cfg.em_per_frame {
            let samples = Self::lab_samples_of_grid(&grid_lab, 3);
            self.gmm = self.refine_from_samples(&samples);
        }
        let labels: Option<RoadLabelMap> =
            self.gmm.as_ref().map(|gmm| segment_grid(gmm, &grid_lab));
        let boundary = labels.as_ref().and_then(|l| match extract_boundary(l) {
            Ok(b) => Some(b),
            Err(e) => {
                diagnostics.push(format!("boundary: {e}"));
                None
            }
        });

        // Vanishing-point extension.
        let vp = lanes.as_ref().and_then(|l| {
            match vanishing_point_extend(l, &self.rig) {
                Ok(v) => Some(v),
                Err(e) => {
                    log::debug!("frame {frame_id}: vp extension skipped: {e}");
                    None
                }
            }
        });

        // Detection on the perspective L channel.
        let mut detections: Vec<Detection> = match &self.detector {
            None => Vec::new(),
            Some(model) => {
                match build_pyramid(&luma, crate::detect::DEFAULT_CELL, self.cfg.pyramid_interval, 5)
                {
                    Err(e) => {
                        diagnostics.push(format!("detection: {e}"));
                        Vec::new()
                    }
                    Ok(pyr) => match score_and_detect(&pyr, model, self.cfg.det_threshold) {
                        Ok(dets) => dets,
                        Err(e) => {
                            diagnostics.push(format!("detection: {e}"));
                            Vec::new()
                        }
                    },
                }
            }
        };
        if let Some(lanes) = &lanes {
            for det in &mut detections {
                if let Err(e) = assign_lane(det, lanes, &self.rig) {
                    log::debug!("frame {frame_id}: lane assignment: {e}");
                }
            }
        }

        // Optical flow against the previous frame: road background for the
        // departure angle, detection boxes for mobility.
        let flow_params = FlowParams {
            pyramid_levels: self.cfg.flow_levels,
            window: self.cfg.flow_window,
            ..Default::default()
        };
        let margin = self.cfg.flow_window / 2 + 2;
        let mut departure: Option<DepartureState> = None;
        let mut background_flow = (0.0f32, 0.0f32);
        let mut flow_field: Option<FlowField> = None;
        if let Some(prev) = &self.prev_luma {
            // Seeds: a road grid plus per-detection interiors.
            let mut points = Vec::new();
            let mut road_count = 0usize;
            let stride = self.cfg.flow_stride_px.max(4);
            let mut y = margin;
            while y < self.rig.rows - margin {
                let mut x = margin;
                while x < self.rig.cols - margin {
                    let is_road = labels
                        .as_ref()
                        .and_then(|l| {
                            pixel_to_ground(&self.rig, y as f64, x as f64)
                                .ok()
                                .and_then(|(gx, gy)| l.label_at_ground(gx, gy))
                        })
                        .map(|c| c == CellLabel::Road)
                        .unwrap_or(false);
                    if is_road {
                        points.push((x as f32, y as f32));
                        road_count += 1;
                    }
                    x += stride;
                }
                y += stride;
            }
            for det in &detections {
                let (bx, by, bw, bh) = det.bbox;
                let mut y = by.max(margin as f32);
                while y < (by + bh).min((self.rig.rows - margin) as f32) {
                    let mut x = bx.max(margin as f32);
                    while x < (bx + bw).min((self.rig.cols - margin) as f32) {
                        points.push((x, y));
                        x += stride as f32;
                    }
                    y += stride as f32;
                }
            }

            match lk_flow(prev, &luma, &points, &flow_params) {
                Err(e) => diagnostics.push(format!("flow: {e}")),
                Ok(field) => {
                    // Background flow: median over the road seeds.
                    let road_field = FlowField {
                        vectors: field.vectors[..road_count].to_vec(),
                    };
                    let mut dxs: Vec<f32> = road_field
                        .vectors
                        .iter()
                        .filter(|v| v.reliable)
                        .map(|v| v.disp.0)
                        .collect();
                    let mut dys: Vec<f32> = road_field
                        .vectors
                        .iter()
                        .filter(|v| v.reliable)
                        .map(|v| v.disp.1)
                        .collect();
                    if !dxs.is_empty() {
                        dxs.sort_by(f32::total_cmp);
                        dys.sort_by(f32::total_cmp);
                        background_flow = (dxs[dxs.len() / 2], dys[dys.len() / 2]);
                    }
                    // Departure uses near-field vectors only: beyond ~20 m
                    // the road texture aliases and the ground Jacobian blows
                    // small pixel errors up.
                    let near_field = FlowField {
                        vectors: road_field
                            .vectors
                            .iter()
                            .filter(|v| {
                                pixel_to_ground(&self.rig, v.pos.1 as f64, v.pos.0 as f64)
                                    .map(|(gx, _)| gx < 20.0)
                                    .unwrap_or(false)
                            })
                            .copied()
                            .collect(),
                    };
                    match departure_angle(&near_field, &self.rig) {
                        Ok(state) => departure = Some(state),
                        Err(e) => diagnostics.push(format!("departure: {e}")),
                    }
                    flow_field = Some(field);
                }
            }
        } else {
            diagnostics.push("first frame: no flow reference".to_string());
        }

        // Assemble the per-frame record.
        let thresholds = MobilityThresholds {
            static_px: self.cfg.mobility_static_px,
            moving_px: self.cfg.mobility_moving_px,
            ..Default::default()
        };
        let det_records: Vec<DetectionRecord> = detections
            .iter()
            .map(|det| {
                let tag = flow_field
                    .as_ref()
                    .map(|f| mobility(det.bbox, f, background_flow, &thresholds));
                DetectionRecord {
                    bbox_px: [det.bbox.0, det.bbox.1, det.bbox.2, det.bbox.3],
                    score: det.score,
                    ground_xy: det.ground.map(|(x, y)| [x, y]),
                    lane_index: det.lane_index,
                    relative_position: det
                        .relative_position
                        .map(|p| format!("{p:?}").to_lowercase()),
                    mobility: tag
                        .map(|t| t.tag)
                        .unwrap_or(crate::motion::Mobility::Unknown),
                    rel_flow_px: tag.map(|t| t.rel_flow_px),
                }
            })
            .collect();

        let lane_summary = lanes.as_ref().map(|set| LaneSummary {
            ego_index: set.ego_index,
            lateral_offset_m: set.lateral_offset,
            partial: set.partial,
            lane_count: set.curves.len(),
            curves: set
                .curves
                .iter()
                .map(|c| CurveRecord {
                    y0: c.y0,
                    a: c.a,
                    b: c.b,
                    c: c.c,
                    support: c.support,
                    domain: [c.domain.0, c.domain.1],
                })
                .collect(),
            departure_lambda: departure.map(|d| d.lambda),
            departure_angle_rad: departure.map(|d| d.angle_rad),
        });

        let boundary_summary = boundary.as_ref().map(|(left, right)| {
            let decimate = |poly: &[(f64, f64)]| {
                let step = (poly.len() / 24).max(1);
                poly.iter()
                    .step_by(step)
                    .map(|(x, y)| [*x, *y])
                    .collect::<Vec<_>>()
            };
            let widths: Vec<f64> = left
                .iter()
                .zip(right)
                .map(|((_, yl), (_, yr))| yl - yr)
                .collect();
            BoundarySummary {
                left: decimate(left),
                right: decimate(right),
                mean_width_m: widths.iter().sum::<f64>() / widths.len().max(1) as f64,
                vanishing_point_px: vp.as_ref().map(|v| [v.vp_px.0, v.vp_px.1]),
            }
        });

        let position = fuse(
            frame_id,
            timestamp_s,
            lane_summary,
            boundary_summary,
            det_records,
            gps,
            &mut self.smoother,
            diagnostics,
        );

        let overlay = self.render_overlays.then(|| {
            overlay::draw(
                img,
                &self.rig,
                lanes.as_ref(),
                boundary.as_ref(),
                vp.as_ref(),
                &detections,
                &position,
            )
        });

        self.prev_luma = Some(luma);

        FrameResult {
            output: PipelineFrameOutput {
                lanes,
                boundary,
            },
            position,
            detections,
            overlay,
        }
    }
}
