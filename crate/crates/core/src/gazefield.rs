//! Gaze maps: nonnegative 2D attention fields over image coordinates, their
//! synthesis as Gaussian blobs, and binary PGM (P5) persistence so externally
//! produced maps can be loaded.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs;
use std::io::Write;
use std::path::Path;

/// Nonnegative 2D attention field. Values are intensities, not probabilities;
/// scaling happens only where a keep mask is built or a map is serialized.
#[derive(Debug, Clone, PartialEq)]
pub struct GazeMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl GazeMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<GazeMap> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidShape(
                "gaze map extents must be >= 1".into(),
            ));
        }
        if values.len() != height * width {
            return Err(Error::InvalidShape(format!(
                "gaze map {}x{} needs {} values, got {}",
                height,
                width,
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidParameter(
                "gaze map values must be finite and nonnegative".into(),
            ));
        }
        Ok(GazeMap {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> GazeMap {
        GazeMap {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.width + j]
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.height, self.width], self.values.clone())
            .expect("gaze map is a valid 2D tensor")
    }

    pub fn from_tensor(t: &Tensor) -> Result<GazeMap> {
        if t.shape().len() != 2 {
            return Err(Error::InvalidShape(format!(
                "expected 2D tensor, got {:?}",
                t.shape()
            )));
        }
        GazeMap::new(t.shape()[0], t.shape()[1], t.data().to_vec())
    }

    /// Pointwise sum, used to compose multi-blob fields.
    pub fn add(&self, other: &GazeMap) -> Result<GazeMap> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Broadcast(format!(
                "gaze maps {}x{} and {}x{} differ",
                self.height, self.width, other.height, other.width
            )));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        GazeMap::new(self.height, self.width, values)
    }
}

/// Divide by the maximum so values land in [0, 1] with max exactly 1.
/// An all-zero map stays all-zero.
pub fn normalize_max(g: &GazeMap) -> GazeMap {
    let m = g.max();
    if m <= 0.0 {
        return GazeMap::zeros(g.height, g.width);
    }
    let values = g.values.iter().map(|&v| v / m).collect();
    GazeMap {
        height: g.height,
        width: g.width,
        values,
    }
}

/// Unnormalized Gaussian blob: value(i, j) = exp(-((j-cx)^2 + (i-cy)^2) / (2 sigma^2)).
/// The center may lie outside the frame; the peak is 1 when it is on-grid.
pub fn gaussian_blob(h: usize, w: usize, cx: f64, cy: f64, sigma: f64) -> Result<GazeMap> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "blob sigma must be positive, got {sigma}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::InvalidShape("blob extents must be >= 1".into()));
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut values = Vec::with_capacity(h * w);
    for i in 0..h {
        let dy = i as f64 - cy;
        for j in 0..w {
            let dx = j as f64 - cx;
            values.push((-(dx * dx + dy * dy) * inv).exp() as f32);
        }
    }
    GazeMap::new(h, w, values)
}

/// Gaussian blob centered on the frame.
pub fn center_blob(h: usize, w: usize, sigma: f64) -> Result<GazeMap> {
    gaussian_blob(h, w, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, sigma)
}

/// How the oracle's attention field is placed over the rendered view.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GazeOracleConfig {
    /// Blob sigma as a fraction of image width.
    pub sigma_frac: f64,
    /// Center jitter sigma (fraction of image width) in estimated mode.
    pub jitter_frac: f64,
    /// Additive white-noise amplitude in estimated mode.
    pub noise_level: f32,
    /// Distance along the lane to the fixation point, meters.
    pub lookahead_m: f64,
}

impl Default for GazeOracleConfig {
    fn default() -> Self {
        GazeOracleConfig {
            sigma_frac: 0.06,
            jitter_frac: 0.04,
            noise_level: 0.05,
            lookahead_m: 12.0,
        }
    }
}

/// Ground-truth attention field for a world state: one blob at the lane
/// lookahead point, plus one on the lead vehicle while an overtake is
/// commanded. Falls back to a centered blob if the lookahead point leaves
/// the image. Stands in for a learned gaze estimator.
pub fn gaze_oracle(
    track: &crate::simworld::Track,
    state: &crate::simworld::WorldState,
    camera: &crate::simworld::CameraConfig,
    command: crate::simworld::ManeuverCommand,
    expert: &crate::simworld::ExpertParams,
    cfg: &GazeOracleConfig,
) -> GazeMap {
    gaze_oracle_inner(track, state, camera, command, expert, cfg, None)
}

/// Estimated-gaze condition: the oracle with per-blob center jitter and
/// additive pixel noise, emulating an imperfect gaze predictor.
pub fn gaze_oracle_estimated(
    track: &crate::simworld::Track,
    state: &crate::simworld::WorldState,
    camera: &crate::simworld::CameraConfig,
    command: crate::simworld::ManeuverCommand,
    expert: &crate::simworld::ExpertParams,
    cfg: &GazeOracleConfig,
    rng: &mut crate::tensor::RngStream,
) -> GazeMap {
    gaze_oracle_inner(track, state, camera, command, expert, cfg, Some(rng))
}

fn gaze_oracle_inner(
    track: &crate::simworld::Track,
    state: &crate::simworld::WorldState,
    camera: &crate::simworld::CameraConfig,
    command: crate::simworld::ManeuverCommand,
    expert: &crate::simworld::ExpertParams,
    cfg: &GazeOracleConfig,
    mut rng: Option<&mut crate::tensor::RngStream>,
) -> GazeMap {
    use crate::simworld::ManeuverCommand;

    let (h, w) = (camera.image_h, camera.image_w);
    let sigma = cfg.sigma_frac * w as f64;
    let jitter = cfg.jitter_frac * w as f64;
    let jit = |rng: &mut Option<&mut crate::tensor::RngStream>| -> (f64, f64) {
        match rng {
            Some(r) => (
                r.next_normal() as f64 * jitter,
                r.next_normal() as f64 * jitter,
            ),
            None => (0.0, 0.0),
        }
    };

    let lane = match command {
        ManeuverCommand::Follow => expert.base_lane,
        ManeuverCommand::Overtake => expert.passing_lane,
    };
    let (px, py) = track.offset_point(state.s + cfg.lookahead_m, track.lane_center(lane));
    let (x_e, y_e) = state.to_ego(track, px, py);
    let mut map = match camera.project(x_e, y_e, 0.0) {
        Some((row, col)) => {
            let (jx, jy) = jit(&mut rng);
            gaussian_blob(h, w, col + jx, row + jy, sigma).expect("positive sigma")
        }
        None => center_blob(h, w, sigma).expect("positive sigma"),
    };

    if command == ManeuverCommand::Overtake {
        if let Some(car_idx) = crate::simworld::expert_overtake_target(state, expert) {
            let car = &state.traffic[car_idx];
            let (cx, cy) = track.offset_point(car.s, track.lane_center(car.lane));
            let (x_c, y_c) = state.to_ego(track, cx, cy);
            if let Some((row, col)) = camera.project(x_c, y_c, 0.6) {
                let (jx, jy) = jit(&mut rng);
                let blob = gaussian_blob(h, w, col + jx, row + jy, sigma).expect("positive sigma");
                map = map.add(&blob).expect("same shape");
            }
        }
    }

    if let Some(r) = rng.as_deref_mut() {
        if cfg.noise_level > 0.0 {
            let noisy = map
                .values()
                .iter()
                .map(|&v| v + cfg.noise_level * r.next_f32())
                .collect();
            map = GazeMap::new(h, w, noisy).expect("noise keeps values nonnegative");
        }
    }
    map
}

/// Write raw 8-bit grayscale bytes as binary PGM (frames keep their absolute
/// brightness; no normalization).
pub fn save_pgm_bytes(path: &Path, height: usize, width: usize, bytes: &[u8]) -> Result<()> {
    if bytes.len() != height * width {
        return Err(Error::InvalidShape(format!(
            "{}x{} image needs {} bytes, got {}",
            height,
            width,
            height * width,
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(32 + bytes.len());
    write!(out, "P5\n{} {}\n255\n", width, height).map_err(|e| Error::io(path, e))?;
    out.extend_from_slice(bytes);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read a binary PGM as raw bytes: (height, width, data).
pub fn load_pgm_bytes(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (map, _) = parse_pgm(&bytes)?;
    let data = map
        .values()
        .iter()
        .map(|&v| (v * 255.0).round() as u8)
        .collect();
    Ok((map.height(), map.width(), data))
}

/// Write as binary PGM (P5, maxval 255). The map is max-normalized before
/// quantization; bytes are round(v * 255) with halves rounding up.
pub fn save_pgm(g: &GazeMap, path: &Path) -> Result<()> {
    let norm = normalize_max(g);
    let mut out = Vec::with_capacity(32 + norm.values.len());
    write!(out, "P5\n{} {}\n255\n", norm.width, norm.height)
        .map_err(|e| Error::io(path, e))?;
    out.extend(norm.values.iter().map(|&v| (v * 255.0).round() as u8));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read a binary PGM (P5, 8-bit) into a gaze map with values in [0, 1].
/// Comment lines are tolerated anywhere in the header.
pub fn load_pgm(path: &Path) -> Result<GazeMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (map, _) = parse_pgm(&bytes)?;
    Ok(map)
}

/// Parse P5 bytes; returns the map and the total bytes consumed.
pub fn parse_pgm(bytes: &[u8]) -> Result<(GazeMap, usize)> {
    let fail = |pos: usize, message: &str| Error::Parse {
        offset: pos,
        message: message.to_string(),
    };

    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(fail(0, "missing P5 magic"));
    }
    let mut pos = 2usize;

    let mut fields = [0usize; 3]; // width, height, maxval
    for field in fields.iter_mut() {
        // Skip whitespace and comment lines.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(fail(pos, "truncated header")),
            }
        }
        let start = pos;
        while let Some(b) = bytes.get(pos) {
            if b.is_ascii_digit() {
                pos += 1;
            } else {
                break;
            }
        }
        if pos == start {
            return Err(fail(pos, "expected decimal header field"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse::<usize>()
            .map_err(|_| fail(start, "header field out of range"))?;
    }

    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if width == 0 || height == 0 {
        return Err(fail(2, "zero image extent"));
    }
    if maxval != 255 {
        return Err(fail(pos, "only 8-bit maxval 255 is supported"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(fail(pos, "expected whitespace before payload")),
    }
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(fail(
            bytes.len(),
            &format!("payload truncated: need {} bytes from offset {}", need, pos),
        ));
    }
    let values = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Ok((GazeMap::new(height, width, values)?, pos + need))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_divides_by_max() {
        let g = GazeMap::new(2, 2, vec![0.0, 2.0, 4.0, 0.0]).unwrap();
        let n = normalize_max(&g);
        assert_eq!(n.values(), &[0.0, 0.5, 1.0, 0.0]);
    }

    #[test]
    fn normalize_keeps_all_zeros() {
        let g = GazeMap::zeros(3, 2);
        assert_eq!(normalize_max(&g), g);
    }

    #[test]
    fn normalize_is_idempotent() {
        let g = GazeMap::new(1, 3, vec![0.2, 0.9, 0.4]).unwrap();
        let once = normalize_max(&g);
        let twice = normalize_max(&once);
        for (a, b) in once.values().iter().zip(twice.values()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn blob_peak_and_sigma_value() {
        let g = gaussian_blob(9, 9, 4.0, 4.0, 2.0).unwrap();
        assert!((g.at(4, 4) - 1.0).abs() < 1e-7);
        // Distance sigma from the center along the row.
        assert!((g.at(4, 6) as f64 - (-0.5f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn blob_mirror_symmetry() {
        let g = gaussian_blob(7, 5, 2.0, 3.0, 1.5).unwrap();
        for i in 0..7 {
            for j in 0..5 {
                assert_eq!(g.at(i, j), g.at(6 - i, j));
                assert_eq!(g.at(i, j), g.at(i, 4 - j));
            }
        }
    }

    #[test]
    fn blob_rejects_bad_sigma() {
        assert!(matches!(
            gaussian_blob(4, 4, 1.0, 1.0, 0.0),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn center_blob_matches_definition() {
        let c = center_blob(5, 5, 1.2).unwrap();
        let g = gaussian_blob(5, 5, 2.0, 2.0, 1.2).unwrap();
        assert_eq!(c, g);
        let argmax = c
            .values()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmax, 2 * 5 + 2);
    }

    #[test]
    fn center_blob_flattens_at_large_sigma() {
        let c = center_blob(5, 7, 1e3).unwrap();
        let min = c.values().iter().copied().fold(1.0f32, f32::min);
        assert!(c.max() / min < 1.0 + 1e-4);
    }

    #[test]
    fn pgm_quantization_oracle() {
        let g = GazeMap::new(2, 2, vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.pgm");
        save_pgm(&g, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..10], b"P5\n2 2\n255");
        assert_eq!(&bytes[bytes.len() - 4..], &[0u8, 255, 128, 64]);
    }

    #[test]
    fn pgm_round_trip_bound() {
        let g = gaussian_blob(10, 16, 8.0, 5.0, 3.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.pgm");
        save_pgm(&g, &path).unwrap();
        let back = load_pgm(&path).unwrap();
        let norm = normalize_max(&g);
        for (a, b) in norm.values().iter().zip(back.values()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn pgm_zero_map_round_trips_exactly() {
        let g = GazeMap::zeros(4, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.pgm");
        save_pgm(&g, &path).unwrap();
        assert_eq!(load_pgm(&path).unwrap(), g);
    }

    #[test]
    fn pgm_comments_tolerated_on_read() {
        let bytes = b"P5\n# made elsewhere\n2 1\n# more\n255\n\x00\xff";
        let (g, used) = parse_pgm(bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(g.values(), &[0.0, 1.0]);
    }

    #[test]
    fn pgm_errors_carry_byte_offsets() {
        match parse_pgm(b"P6\n2 2\n255\n....") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other:?}"),
        }
        match parse_pgm(b"P5\n4 4\n255\n\x00\x00") {
            Err(Error::Parse { offset, .. }) => assert!(offset > 0),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    mod oracle {
        use super::super::*;
        use crate::simworld::{
            expert_policy, generate_track, CameraConfig, ExpertParams, ManeuverCommand,
            SimParams, StyleFamily, TrackParams, TrafficCar, WorldState,
        };

        fn straight_setup() -> (crate::simworld::Track, WorldState, CameraConfig) {
            let p = TrackParams {
                curvature_max: 0.0,
                ..TrackParams::pool_default(StyleFamily::Seen)
            };
            let track = generate_track(1, &p).unwrap();
            let state = WorldState::centered(&track, 60.0, 15.0);
            (track, state, CameraConfig::default())
        }

        /// Count separated peaks: connected components above 60% of the max
        /// (plateau-safe, unlike strict local-maximum tests).
        fn local_maxima(g: &GazeMap) -> usize {
            let (h, w) = (g.height(), g.width());
            let cut = 0.6 * g.max();
            let mut seen = vec![false; h * w];
            let mut count = 0;
            for start in 0..h * w {
                if seen[start] || g.values()[start] < cut {
                    continue;
                }
                count += 1;
                let mut stack = vec![start];
                seen[start] = true;
                while let Some(px) = stack.pop() {
                    let (i, j) = (px / w, px % w);
                    for (di, dj) in [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)] {
                        let (ni, nj) = (i as i64 + di, j as i64 + dj);
                        if ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                            continue;
                        }
                        let np = ni as usize * w + nj as usize;
                        if !seen[np] && g.values()[np] >= cut {
                            seen[np] = true;
                            stack.push(np);
                        }
                    }
                }
            }
            count
        }

        #[test]
        fn centered_follow_blob_sits_on_the_lane_column() {
            let (track, state, cam) = straight_setup();
            let ep = ExpertParams::default();
            let cfg = GazeOracleConfig::default();
            let g = gaze_oracle(&track, &state, &cam, ManeuverCommand::Follow, &ep, &cfg);
            assert_eq!(local_maxima(&g), 1);

            let argmax = g
                .values()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            let col = argmax % g.width();
            // The ego sits on the lane center, so the fixation column is the
            // image center.
            assert!(
                (col as f64 - cam.cx()).abs() <= 1.0,
                "blob at column {col}, lane center near {}",
                cam.cx()
            );
        }

        #[test]
        fn overtake_with_lead_car_has_two_maxima() {
            let (track, mut state, cam) = straight_setup();
            state.traffic.push(TrafficCar {
                lane: 0,
                s: state.s + 22.0,
                speed: 7.0,
            });
            let ep = ExpertParams::default();
            let sim = SimParams::default();
            let (_, cmd) = expert_policy(&track, &state, &ep, &sim);
            assert_eq!(cmd, ManeuverCommand::Overtake);
            // A blob narrow enough that lane fixation and car fixation stay
            // separated at this geometry.
            let cfg = GazeOracleConfig {
                sigma_frac: 0.04,
                ..GazeOracleConfig::default()
            };
            let g = gaze_oracle(&track, &state, &cam, cmd, &ep, &cfg);
            assert_eq!(local_maxima(&g), 2);
        }

        #[test]
        fn jitter_and_noise_move_the_map_away_from_the_oracle() {
            let (track, state, cam) = straight_setup();
            let ep = ExpertParams::default();
            let cfg = GazeOracleConfig::default();
            let real = gaze_oracle(&track, &state, &cam, ManeuverCommand::Follow, &ep, &cfg);
            let mut rng = crate::tensor::RngStream::from_seed(5);
            let est = gaze_oracle_estimated(
                &track,
                &state,
                &cam,
                ManeuverCommand::Follow,
                &ep,
                &cfg,
                &mut rng,
            );
            let kl = crate::metrics::kl_divergence(&real, &est).unwrap();
            assert!(kl > 0.0, "KL(real || estimated) = {kl}");
        }

        #[test]
        fn behind_camera_lookahead_falls_back_to_center_blob() {
            let (track, mut state, cam) = straight_setup();
            state.heading_err = std::f64::consts::PI; // facing backwards
            let ep = ExpertParams::default();
            let cfg = GazeOracleConfig::default();
            let g = gaze_oracle(&track, &state, &cam, ManeuverCommand::Follow, &ep, &cfg);
            let want = center_blob(cam.image_h, cam.image_w, cfg.sigma_frac * cam.image_w as f64)
                .unwrap();
            assert_eq!(g, want);
        }
    }

    proptest! {
        #[test]
        fn normalize_is_scale_invariant(
            vals in proptest::collection::vec(0.0f32..10.0, 6),
            c in 0.01f32..100.0,
        ) {
            let g = GazeMap::new(2, 3, vals).unwrap();
            let scaled = GazeMap::new(2, 3, g.values().iter().map(|v| v * c).collect()).unwrap();
            let a = normalize_max(&g);
            let b = normalize_max(&scaled);
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }

        #[test]
        fn pgm_round_trip_property(vals in proptest::collection::vec(0.0f32..1.0, 12)) {
            let g = GazeMap::new(3, 4, vals).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.pgm");
            save_pgm(&g, &path).unwrap();
            let back = load_pgm(&path).unwrap();
            let norm = normalize_max(&g);
            for (a, b) in norm.values().iter().zip(back.values()) {
                prop_assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
            }
        }
    }
}
