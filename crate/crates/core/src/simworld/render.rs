//! Scanline driver-view renderer. Ground rows are painted by inverting the
//! camera ray onto the road plane and classifying each pixel's lateral
//! offset against the interpolated centerline; background rows get a
//! world-anchored hill profile; traffic cars are projected rectangles drawn
//! far to near. Output is quantized to 8 bits, so a rendered frame and its
//! PGM round-trip are byte-identical.

use super::{CameraConfig, Track, WorldState};
use crate::tensor::Tensor;

const LOOKAHEAD_M: f64 = 130.0;
const SAMPLE_STEP_M: f64 = 2.0;
const POST_HEIGHT_M: f64 = 1.5;
const POST_LATERAL_M: f64 = 1.5;
const CAR_HALF_WIDTH_M: f64 = 0.9;
const CAR_HEIGHT_M: f64 = 1.3;
const CAR_REAR_OFFSET_M: f64 = 2.0;

struct CenterlineSample {
    x: f64,
    y: f64,
    nx: f64,
    ny: f64,
    s: f64,
}

fn centerline_in_ego(track: &Track, state: &WorldState) -> Vec<CenterlineSample> {
    let (_, _, ego_h) = state.ego_pose(track);
    let steps = (LOOKAHEAD_M / SAMPLE_STEP_M) as i64;
    let mut pts = Vec::with_capacity((steps + 3) as usize);
    for k in -2..=steps {
        let s = state.s + k as f64 * SAMPLE_STEP_M;
        let (px, py, ph) = track.point_at(s);
        let (x, y) = state.to_ego(track, px, py);
        let hrel = ph - ego_h;
        pts.push(CenterlineSample {
            x,
            y,
            nx: -hrel.sin(),
            ny: hrel.cos(),
            s,
        });
    }
    pts
}

/// Interpolate the centerline at forward distance `x`, clamping beyond the
/// sampled range. Returns (y_center, nx, ny, s).
fn interp_at(pts: &[CenterlineSample], idx: &mut usize, x: f64) -> (f64, f64, f64, f64) {
    while *idx + 2 < pts.len() && pts[*idx + 1].x < x {
        *idx += 1;
    }
    let (a, b) = (&pts[*idx], &pts[*idx + 1]);
    let span = (b.x - a.x).abs().max(1e-9);
    let t = ((x - a.x) / span).clamp(0.0, 1.0);
    (
        a.y + (b.y - a.y) * t,
        a.nx + (b.nx - a.nx) * t,
        a.ny + (b.ny - a.ny) * t,
        a.s + (b.s - a.s) * t,
    )
}

fn fill_rect(img: &mut [f32], w: usize, h: usize, r0: f64, r1: f64, c0: f64, c1: f64, shade: f32) {
    let rr0 = r0.round().max(0.0) as usize;
    let rr1 = (r1.round().min(h as f64 - 1.0)) as usize;
    let cc0 = c0.round().max(0.0) as usize;
    let cc1 = (c1.round().min(w as f64 - 1.0)) as usize;
    if r0 > h as f64 - 1.0 || r1 < 0.0 || c0 > w as f64 - 1.0 || c1 < 0.0 {
        return;
    }
    for r in rr0..=rr1 {
        for c in cc0..=cc1 {
            img[r * w + c] = shade;
        }
    }
}

/// Render the driver view as 8-bit grayscale bytes (row-major).
pub fn render_view_bytes(track: &Track, state: &WorldState, cam: &CameraConfig) -> Vec<u8> {
    let (h, w) = (cam.image_h, cam.image_w);
    let style = &track.style;
    let mut img = vec![0.0f32; h * w];
    let (_, _, ego_h) = state.ego_pose(track);
    let horizon = cam.horizon_row();
    let half_road = track.road_half_width();
    let pts = centerline_in_ego(track, state);

    // Background: sky, a far hill band, and a nearer ridge band, all
    // world-anchored via the absolute viewing azimuth (even profiles, so a
    // centered view on a straight track stays mirror-symmetric).
    for r in 0..h {
        let ground = cam.ground_for_row(r);
        if ground.is_some() {
            break;
        }
        for c in 0..w {
            let az = ego_h + ((cam.cx() - c as f64) / cam.focal_px).atan();
            let above = horizon - r as f64;
            let hill = style.hill_amplitude as f64 * (0.5 + 0.5 * (style.hill_frequency as f64 * az).cos()) + 2.0;
            let ridge = style.ridge_amplitude as f64 * (0.5 + 0.5 * (style.ridge_frequency as f64 * az).cos());
            img[r * w + c] = if above <= ridge {
                style.ridge_shade
            } else if above <= hill {
                style.hill_shade
            } else {
                style.sky_shade
            };
        }
    }

    // Ground rows.
    let dash_period = (style.dash_length_m + style.dash_gap_m) as f64;
    let mut idx = 0usize;
    for r in 0..h {
        let Some((x_row, pf)) = cam.ground_for_row(r) else {
            continue;
        };
        let (y_c, _nx, ny, s_pt) = interp_at(&pts, &mut idx, x_row);
        let mpp = pf / cam.focal_px; // meters per pixel at this row
        let line_half = (0.09f64).max(0.55 * mpp);
        let ny_safe = ny.max(0.55);
        let dash_on = s_pt.rem_euclid(dash_period) < style.dash_length_m as f64;
        let stripe_phase = 0.5
            + 0.5
                * (std::f64::consts::TAU * s_pt / style.off_road_stripe_period_m as f64).cos();
        let off_road =
            style.off_road_shade + style.off_road_stripe_contrast * (stripe_phase as f32 - 0.5);

        for c in 0..w {
            let y_g = (cam.cx() - c as f64) * mpp;
            let d = (y_g - y_c) / ny_safe;
            let mut shade = if d.abs() <= half_road {
                style.road_shade
            } else {
                off_road
            };
            // Solid edge lines.
            if (d.abs() - half_road).abs() <= line_half {
                shade = style.lane_line_shade;
            }
            // Dashed separators between lanes.
            if dash_on {
                for lane in 1..track.lane_count {
                    let sep = -half_road + lane as f64 * track.lane_width;
                    if (d - sep).abs() <= line_half {
                        shade = style.lane_line_shade;
                    }
                }
            }
            img[r * w + c] = shade;
        }
    }

    // Roadside posts: vertical bars just off the pavement. On curves the
    // side follows the style rule; on straights they sit on both sides.
    if style.post_spacing_m > 0.0 {
        let spacing = style.post_spacing_m as f64;
        let first = (state.s / spacing).ceil() as i64;
        let last = ((state.s + LOOKAHEAD_M) / spacing).floor() as i64;
        for k in (first..=last).rev() {
            let s_p = k as f64 * spacing;
            let kappa = track.curvature_at(s_p);
            let sides: &[f64] = if kappa == 0.0 {
                &[-1.0, 1.0]
            } else {
                match style.post_side_rule {
                    1 => {
                        if kappa > 0.0 {
                            &[-1.0]
                        } else {
                            &[1.0]
                        }
                    }
                    -1 => {
                        if kappa > 0.0 {
                            &[1.0]
                        } else {
                            &[-1.0]
                        }
                    }
                    _ => {
                        if k % 2 == 0 {
                            &[1.0]
                        } else {
                            &[-1.0]
                        }
                    }
                }
            };
            for &side in sides {
                let d_post = side * (half_road + POST_LATERAL_M);
                let (px, py) = track.offset_point(s_p, d_post);
                let (x_e, y_e) = state.to_ego(track, px, py);
                if x_e < 2.0 {
                    continue;
                }
                let Some((r_base, c0)) = cam.project(x_e, y_e, 0.0) else {
                    continue;
                };
                let Some((r_top, _)) = cam.project(x_e, y_e, POST_HEIGHT_M) else {
                    continue;
                };
                let half_px = (0.5 * cam.focal_px * 0.12 / x_e).max(0.5);
                fill_rect(
                    &mut img,
                    w,
                    h,
                    r_top,
                    r_base,
                    c0 - half_px,
                    c0 + half_px,
                    style.post_shade,
                );
            }
        }
    }

    // Traffic, far to near so close cars occlude distant ones.
    let mut order: Vec<usize> = (0..state.traffic.len()).collect();
    order.sort_by(|&a, &b| state.traffic[b].s.total_cmp(&state.traffic[a].s));
    for i in order {
        let car = &state.traffic[i];
        let d_car = track.lane_center(car.lane);
        let (px, py) = track.offset_point(car.s - CAR_REAR_OFFSET_M, d_car);
        let (x_e, y_e) = state.to_ego(track, px, py);
        if x_e < 1.5 || x_e > LOOKAHEAD_M {
            continue;
        }
        let Some((r_base, c_l)) = cam.project(x_e, y_e + CAR_HALF_WIDTH_M, 0.0) else {
            continue;
        };
        let Some((r_top, c_r)) = cam.project(x_e, y_e - CAR_HALF_WIDTH_M, CAR_HEIGHT_M) else {
            continue;
        };
        fill_rect(&mut img, w, h, r_top, r_base, c_l, c_r, style.car_shade);
        // Dark underbody strip anchors the car to the road.
        let strip = (r_base - r_top) * 0.18;
        fill_rect(
            &mut img,
            w,
            h,
            r_base - strip,
            r_base,
            c_l,
            c_r,
            style.car_shade * 0.4,
        );
    }

    img.iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Rendered view as a (H, W, 1) tensor with values k/255.
pub fn render_view(track: &Track, state: &WorldState, cam: &CameraConfig) -> Tensor {
    let bytes = render_view_bytes(track, state, cam);
    let data = bytes.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::from_vec(&[cam.image_h, cam.image_w, 1], data).expect("render shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simworld::{generate_track, StyleFamily, TrackParams, TrafficCar};

    fn straight_track() -> Track {
        let p = TrackParams {
            curvature_max: 0.0,
            ..TrackParams::pool_default(StyleFamily::Seen)
        };
        generate_track(1, &p).unwrap()
    }

    #[test]
    fn rendering_is_pure() {
        let track = straight_track();
        let cam = CameraConfig::default();
        let mut st = WorldState::centered(&track, 60.0, 15.0);
        st.traffic.push(TrafficCar {
            lane: 0,
            s: 90.0,
            speed: 7.0,
        });
        let a = render_view_bytes(&track, &st, &cam);
        let b = render_view_bytes(&track, &st, &cam);
        assert_eq!(a, b);
    }

    #[test]
    fn centered_straight_view_is_mirror_symmetric() {
        let track = straight_track();
        let cam = CameraConfig::default();
        let mut st = WorldState::centered(&track, 60.0, 15.0);
        st.offset = 0.0;
        let img = render_view_bytes(&track, &st, &cam);
        for r in 0..cam.image_h {
            for c in 0..cam.image_w {
                let a = img[r * cam.image_w + c] as i32;
                let b = img[r * cam.image_w + (cam.image_w - 1 - c)] as i32;
                assert!(
                    (a - b).abs() <= 1,
                    "row {r} col {c}: {a} vs {b} not mirror-symmetric"
                );
            }
        }
    }

    #[test]
    fn opposite_offsets_give_mirrored_frames() {
        let track = straight_track();
        let cam = CameraConfig::default();
        let mut left = WorldState::centered(&track, 60.0, 15.0);
        left.offset = 1.0;
        let mut right = left.clone();
        right.offset = -1.0;
        let img_l = render_view_bytes(&track, &left, &cam);
        let img_r = render_view_bytes(&track, &right, &cam);
        for r in 0..cam.image_h {
            for c in 0..cam.image_w {
                let a = img_l[r * cam.image_w + c] as i32;
                let b = img_r[r * cam.image_w + (cam.image_w - 1 - c)] as i32;
                assert!((a - b).abs() <= 1, "row {r} col {c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn closer_cars_occupy_more_pixels() {
        let track = straight_track();
        let cam = CameraConfig::default();
        let count_car_px = |dist: f64| -> usize {
            let mut st = WorldState::centered(&track, 60.0, 15.0);
            st.offset = 0.0;
            st.traffic.push(TrafficCar {
                lane: 0,
                s: 60.0 + dist,
                speed: 7.0,
            });
            let with_car = render_view_bytes(&track, &st, &cam);
            st.traffic.clear();
            let without = render_view_bytes(&track, &st, &cam);
            with_car
                .iter()
                .zip(&without)
                .filter(|(a, b)| a != b)
                .count()
        };
        let near = count_car_px(10.0);
        let far = count_car_px(40.0);
        assert!(
            near > far && far > 0,
            "near {near} px should exceed far {far} px"
        );
    }

    #[test]
    fn pools_render_visibly_differently() {
        let seen = generate_track(1, &TrackParams::pool_default(StyleFamily::Seen)).unwrap();
        let unseen = generate_track(1, &TrackParams::pool_default(StyleFamily::Unseen)).unwrap();
        let cam = CameraConfig::default();
        let a = render_view_bytes(&seen, &WorldState::centered(&seen, 60.0, 15.0), &cam);
        let b = render_view_bytes(&unseen, &WorldState::centered(&unseen, 60.0, 15.0), &cam);
        let differing = a.iter().zip(&b).filter(|(x, y)| x != y).count();
        assert!(
            differing > a.len() / 2,
            "only {differing} of {} pixels differ",
            a.len()
        );
    }
}
