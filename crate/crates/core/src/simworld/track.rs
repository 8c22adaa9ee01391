//! Procedural tracks: a piecewise-curvature centerline plus a rendering
//! style. Styles come in two families so held-out tracks genuinely differ
//! from training tracks (background, markings, curvature statistics).

use crate::error::{Error, Result};
use crate::tensor::RngStream;
use serde::{Deserialize, Serialize};

const TAG_TRACK: u64 = 0x7261_636b; // "rack"

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub length: f64,
    pub curvature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleFamily {
    Seen,
    Unseen,
}

impl StyleFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            StyleFamily::Seen => "seen",
            StyleFamily::Unseen => "unseen",
        }
    }
}

/// Rendering style of a track. The two pools differ in background shading
/// and structure, lane-marking dash pattern, roadside furniture, and the
/// curvature statistics used at generation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackStyle {
    pub family: StyleFamily,
    pub sky_shade: f32,
    pub hill_shade: f32,
    pub hill_amplitude: f32,
    pub hill_frequency: f32,
    pub ridge_shade: f32,
    pub ridge_amplitude: f32,
    pub ridge_frequency: f32,
    pub road_shade: f32,
    pub off_road_shade: f32,
    pub off_road_stripe_contrast: f32,
    pub off_road_stripe_period_m: f32,
    pub lane_line_shade: f32,
    pub dash_length_m: f32,
    pub dash_gap_m: f32,
    pub post_spacing_m: f32,
    pub post_shade: f32,
    /// +1 posts on the outside of curves, -1 inside, 0 alternating.
    pub post_side_rule: i8,
    pub car_shade: f32,
}

impl TrackStyle {
    /// Attribute-level difference count between two styles, used to check
    /// that the pools are genuinely distinct.
    pub fn differing_attributes(&self, other: &TrackStyle) -> usize {
        let mut n = 0;
        n += (self.family != other.family) as usize;
        n += (self.sky_shade != other.sky_shade) as usize;
        n += (self.hill_shade != other.hill_shade) as usize;
        n += (self.hill_frequency != other.hill_frequency) as usize;
        n += (self.road_shade != other.road_shade) as usize;
        n += (self.off_road_shade != other.off_road_shade) as usize;
        n += (self.dash_length_m != other.dash_length_m) as usize;
        n += (self.dash_gap_m != other.dash_gap_m) as usize;
        n += (self.post_spacing_m != other.post_spacing_m) as usize;
        n += (self.post_side_rule != other.post_side_rule) as usize;
        n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackParams {
    pub pool: StyleFamily,
    pub length_m: f64,
    pub lane_width: f64,
    pub lane_count: usize,
    /// Maximum unsigned curvature (1/m); 0 makes every segment straight.
    pub curvature_max: f64,
    pub segment_length: (f64, f64),
    pub straight_fraction: f64,
}

impl TrackParams {
    pub fn pool_default(pool: StyleFamily) -> TrackParams {
        let curvature_max = match pool {
            StyleFamily::Seen => 1.0 / 70.0,
            StyleFamily::Unseen => 1.0 / 55.0,
        };
        TrackParams {
            pool,
            length_m: 2600.0,
            lane_width: 3.5,
            lane_count: 2,
            curvature_max,
            segment_length: (45.0, 95.0),
            straight_fraction: 0.35,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length_m <= 0.0 {
            return Err(Error::InvalidParameter("track length must be > 0".into()));
        }
        if self.lane_width <= 0.0 || self.lane_count == 0 {
            return Err(Error::InvalidParameter("need positive lanes".into()));
        }
        if self.curvature_max < 0.0 || self.curvature_max * self.lane_width >= 0.5 {
            return Err(Error::InvalidParameter(format!(
                "curvature_max {} infeasible for lane width {}",
                self.curvature_max, self.lane_width
            )));
        }
        if self.segment_length.0 <= 0.0 || self.segment_length.1 < self.segment_length.0 {
            return Err(Error::InvalidParameter("bad segment length range".into()));
        }
        if !(0.0..=1.0).contains(&self.straight_fraction) {
            return Err(Error::InvalidParameter("bad straight fraction".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Track {
    pub id: String,
    pub segments: Vec<Segment>,
    pub lane_width: f64,
    pub lane_count: usize,
    pub style: TrackStyle,
    /// Pose (x, y, heading) at the start of each segment, plus the sentinel
    /// pose at the track end; the track starts at the origin heading +x.
    starts: Vec<(f64, f64, f64, f64)>, // (s, x, y, heading)
    total_length: f64,
}

impl Track {
    pub fn from_segments(
        id: String,
        segments: Vec<Segment>,
        lane_width: f64,
        lane_count: usize,
        style: TrackStyle,
    ) -> Result<Track> {
        if segments.is_empty() {
            return Err(Error::InvalidParameter("track needs segments".into()));
        }
        for seg in &segments {
            if seg.length <= 0.0 {
                return Err(Error::InvalidParameter("segment length must be > 0".into()));
            }
            if seg.curvature.abs() * lane_width >= 0.5 {
                return Err(Error::InvalidParameter(format!(
                    "segment curvature {} too sharp for lane width {}",
                    seg.curvature, lane_width
                )));
            }
        }
        let mut starts = Vec::with_capacity(segments.len() + 1);
        let (mut s, mut x, mut y, mut heading) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for seg in &segments {
            starts.push((s, x, y, heading));
            let (nx, ny, nh) = advance(x, y, heading, seg.curvature, seg.length);
            s += seg.length;
            x = nx;
            y = ny;
            heading = nh;
        }
        starts.push((s, x, y, heading));
        Ok(Track {
            id,
            segments,
            lane_width,
            lane_count,
            style,
            starts,
            total_length: s,
        })
    }

    pub fn total_length(&self) -> f64 {
        self.total_length
    }

    /// Half the paved width: lanes span [-half, +half] around the centerline.
    pub fn road_half_width(&self) -> f64 {
        self.lane_width * self.lane_count as f64 / 2.0
    }

    /// Lateral offset of a lane center; lane 0 is the rightmost.
    pub fn lane_center(&self, lane: usize) -> f64 {
        let lane = lane.min(self.lane_count - 1);
        -self.road_half_width() + self.lane_width * (lane as f64 + 0.5)
    }

    fn segment_index(&self, s: f64) -> usize {
        match self
            .starts
            .binary_search_by(|probe| probe.0.total_cmp(&s))
        {
            Ok(i) => i.min(self.segments.len() - 1),
            Err(i) => i.saturating_sub(1).min(self.segments.len() - 1),
        }
    }

    pub fn curvature_at(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, self.total_length);
        self.segments[self.segment_index(s)].curvature
    }

    /// Centerline pose at arc position s (clamped): (x, y, heading).
    pub fn point_at(&self, s: f64) -> (f64, f64, f64) {
        let s = s.clamp(0.0, self.total_length);
        let i = self.segment_index(s);
        let (s0, x, y, h) = self.starts[i];
        let (px, py, ph) = advance(x, y, h, self.segments[i].curvature, s - s0);
        (px, py, ph)
    }

    /// World position of the point at arc s, lateral offset d (positive left).
    pub fn offset_point(&self, s: f64, d: f64) -> (f64, f64) {
        let (x, y, h) = self.point_at(s);
        (x - d * h.sin(), y + d * h.cos())
    }
}

/// Move `length` along an arc of constant curvature.
fn advance(x: f64, y: f64, heading: f64, curvature: f64, length: f64) -> (f64, f64, f64) {
    if curvature.abs() < 1e-12 {
        (
            x + length * heading.cos(),
            y + length * heading.sin(),
            heading,
        )
    } else {
        let h2 = heading + curvature * length;
        (
            x + (h2.sin() - heading.sin()) / curvature,
            y + (heading.cos() - h2.cos()) / curvature,
            h2,
        )
    }
}

/// Style for a given pool and seed. The family decides the structure; the
/// seed jitters shades so tracks within a pool are not clones.
pub fn style_for(pool: StyleFamily, seed: u64) -> TrackStyle {
    let mut rng = RngStream::new(seed, crate::tensor::stream_id(&[TAG_TRACK, 1]));
    let j = |rng: &mut RngStream, lo: f32, hi: f32| rng.range_f32(lo, hi);
    match pool {
        StyleFamily::Seen => TrackStyle {
            family: pool,
            sky_shade: j(&mut rng, 0.78, 0.88),
            hill_shade: j(&mut rng, 0.52, 0.60),
            hill_amplitude: j(&mut rng, 5.0, 8.0),
            hill_frequency: 2.0,
            ridge_shade: j(&mut rng, 0.66, 0.72),
            ridge_amplitude: j(&mut rng, 2.0, 4.0),
            ridge_frequency: 5.0,
            road_shade: j(&mut rng, 0.40, 0.45),
            off_road_shade: j(&mut rng, 0.60, 0.68),
            off_road_stripe_contrast: 0.05,
            off_road_stripe_period_m: 12.0,
            lane_line_shade: 0.92,
            dash_length_m: 4.0,
            dash_gap_m: 4.0,
            post_spacing_m: 50.0,
            post_shade: 0.95,
            post_side_rule: 1,
            car_shade: 0.15,
        },
        StyleFamily::Unseen => TrackStyle {
            family: pool,
            sky_shade: j(&mut rng, 0.28, 0.38),
            hill_shade: j(&mut rng, 0.70, 0.78),
            hill_amplitude: j(&mut rng, 8.0, 12.0),
            hill_frequency: 7.0,
            ridge_shade: j(&mut rng, 0.12, 0.20),
            ridge_amplitude: j(&mut rng, 4.0, 6.0),
            ridge_frequency: 11.0,
            road_shade: j(&mut rng, 0.50, 0.56),
            off_road_shade: j(&mut rng, 0.22, 0.30),
            off_road_stripe_contrast: 0.12,
            off_road_stripe_period_m: 5.0,
            lane_line_shade: 0.85,
            dash_length_m: 1.5,
            dash_gap_m: 2.5,
            post_spacing_m: 32.0,
            post_shade: 0.08,
            post_side_rule: 0,
            car_shade: 0.80,
        },
    }
}

/// Deterministic track generation. The first segment is always straight so
/// episodes start in a stable view.
pub fn generate_track(seed: u64, params: &TrackParams) -> Result<Track> {
    params.validate()?;
    let mut rng = RngStream::new(seed, crate::tensor::stream_id(&[TAG_TRACK, 0]));
    let style = style_for(params.pool, seed);
    let mut segments = vec![Segment {
        length: 80.0,
        curvature: 0.0,
    }];
    let mut built = 80.0f64;
    let mut last_sign = 0.0f64;
    while built < params.length_m {
        let length = rng.range_f32(params.segment_length.0 as f32, params.segment_length.1 as f32)
            as f64;
        let straight = (rng.next_f32() as f64) < params.straight_fraction;
        let curvature = if straight || params.curvature_max == 0.0 {
            0.0
        } else {
            // Alternate bends when possible so the track does not spiral.
            let sign = if last_sign == 0.0 {
                if rng.next_f32() < 0.5 {
                    1.0
                } else {
                    -1.0
                }
            } else {
                -last_sign
            };
            let mag = rng.range_f32(
                (0.4 * params.curvature_max) as f32,
                params.curvature_max as f32,
            ) as f64;
            sign * mag
        };
        if curvature != 0.0 {
            last_sign = curvature.signum();
        }
        segments.push(Segment { length, curvature });
        built += length;
    }
    let id = format!("{}-{:02}", params.pool.as_str(), seed);
    Track::from_segments(id, segments, params.lane_width, params.lane_count, style)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_track() {
        let p = TrackParams::pool_default(StyleFamily::Seen);
        let a = generate_track(3, &p).unwrap();
        let b = generate_track(3, &p).unwrap();
        assert_eq!(a.segments, b.segments);
        assert_eq!(a.style, b.style);
    }

    #[test]
    fn zero_curvature_params_give_a_straight_track() {
        let mut p = TrackParams::pool_default(StyleFamily::Seen);
        p.curvature_max = 0.0;
        let t = generate_track(1, &p).unwrap();
        assert!(t.segments.iter().all(|seg| seg.curvature == 0.0));
        let (x, y, h) = t.point_at(t.total_length());
        assert!((y.abs() < 1e-9) && (h.abs() < 1e-9) && x > 0.0);
    }

    #[test]
    fn pools_differ_in_at_least_two_style_attributes() {
        let seen = style_for(StyleFamily::Seen, 1);
        let unseen = style_for(StyleFamily::Unseen, 1);
        assert!(seen.differing_attributes(&unseen) >= 2);
    }

    #[test]
    fn infeasible_params_are_rejected() {
        let mut p = TrackParams::pool_default(StyleFamily::Seen);
        p.curvature_max = 0.2; // 0.2 * 3.5 = 0.7 >= 0.5
        assert!(matches!(
            generate_track(1, &p),
            Err(Error::InvalidParameter(_))
        ));
        let mut p2 = TrackParams::pool_default(StyleFamily::Seen);
        p2.length_m = 0.0;
        assert!(generate_track(1, &p2).is_err());
    }

    #[test]
    fn arc_geometry_round_trip() {
        // A full circle returns to the start.
        let style = style_for(StyleFamily::Seen, 1);
        let r = 60.0f64;
        let t = Track::from_segments(
            "circle".into(),
            vec![Segment {
                length: std::f64::consts::TAU * r,
                curvature: 1.0 / r,
            }],
            3.5,
            1,
            style,
        )
        .unwrap();
        let (x, y, _) = t.point_at(t.total_length());
        assert!(x.abs() < 1e-6 && y.abs() < 1e-6, "({x}, {y})");
    }

    #[test]
    fn lane_centers_partition_the_road() {
        let p = TrackParams::pool_default(StyleFamily::Seen);
        let t = generate_track(5, &p).unwrap();
        assert_eq!(t.lane_center(0), -1.75);
        assert_eq!(t.lane_center(1), 1.75);
        assert_eq!(t.road_half_width(), 3.5);
    }
}
