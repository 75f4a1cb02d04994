use std::f64::consts::{FRAC_PI_2, PI, TAU};

use super::{Condition, Distance, Location};
use crate::dsp::Image;

pub const HEIGHT: usize = 480;
pub const WIDTH: usize = 640;
const HORIZON: f64 = 360.0;
const CENTRE: (f64, f64) = (215.0, 320.0);

const RING: [u8; 3] = [62, 62, 66];
const HUB: [u8; 3] = [30, 30, 35];
const BLADE_FRONT: [u8; 3] = [40, 90, 170];
const BLADE_BACK: [u8; 3] = [28, 62, 120];
const HOUSING: [u8; 3] = [92, 92, 98];
const STAND: [u8; 3] = [110, 110, 112];
const SLIVER: [u8; 3] = [45, 80, 150];

fn background(y: f64) -> [u8; 3] {
    if y < HORIZON {
        let t = y / HORIZON;
        let v = (205.0 - 20.0 * t) as u8;
        [v, v, v.saturating_add(5)]
    } else {
        let t = (y - HORIZON) / (HEIGHT as f64 - HORIZON);
        [(150.0 - 15.0 * t) as u8, (140.0 - 15.0 * t) as u8, (128.0 - 15.0 * t) as u8]
    }
}

fn radius(distance: Distance) -> f64 {
    match distance {
        Distance::Near => 165.0,
        Distance::Far => 95.0,
    }
}

/// Angle of blade `k` with the first blade pointing straight up.
fn blade_angle(k: usize, blades: usize) -> f64 {
    -FRAC_PI_2 + TAU * k as f64 / blades as f64
}

fn wrap(a: f64) -> f64 {
    (a + PI).rem_euclid(TAU) - PI
}

/// Angular half-width of a blade at normalised radius `u`.
fn blade_half_width(u: f64) -> f64 {
    if !(0.18..=0.88).contains(&u) {
        return -1.0;
    }
    0.05 + 0.33 * (PI * (u - 0.18) / 0.70).sin()
}

const HOLE_RADIUS: f64 = 0.075;
const HOLE_AT: f64 = 0.6;

fn face(dy: f64, dx: f64, r: f64, condition: Condition, back: bool) -> Option<[u8; 3]> {
    let d = (dy * dy + dx * dx).sqrt() / r;
    if d > 1.0 {
        return None;
    }
    if d >= 0.94 {
        return Some(RING);
    }
    if back && d < 0.5 {
        // Motor housing with a rating plate.
        if dy.abs() < 0.08 * r && dx.abs() < 0.22 * r {
            return Some([180, 180, 170]);
        }
        return Some(HOUSING);
    }
    if d < 0.18 {
        return Some(HUB);
    }
    let phi = dy.atan2(if back { -dx } else { dx });
    let blades = condition.blades();
    for k in 0..blades {
        let theta = blade_angle(k, blades);
        if wrap(phi - theta).abs() < blade_half_width(d) {
            if k < condition.holes() {
                let (hy, hx) = (HOLE_AT * theta.sin(), HOLE_AT * theta.cos());
                let (py, px) = (dy / r, if back { -dx } else { dx } / r);
                if (py - hy).powi(2) + (px - hx).powi(2) < HOLE_RADIUS * HOLE_RADIUS {
                    return None;
                }
            }
            return Some(if back { BLADE_BACK } else { BLADE_FRONT });
        }
    }
    None
}

/// Edge-on view: the guard ring is a thin upright band, each blade a faint
/// sliver on it, with the motor body on one side.
fn edge(dy: f64, dx: f64, r: f64, condition: Condition, motor_side: f64) -> Option<[u8; 3]> {
    let u = dy / r;
    let v = dx / r;
    let mx = v * motor_side;
    if (0.06..0.62).contains(&mx) && u.abs() < 0.3 {
        return Some(HOUSING);
    }
    if u.abs() > 1.0 {
        return None;
    }
    if v.abs() < 0.035 || (v.abs() < 0.07 && u.abs() > 0.92) {
        return Some(RING);
    }
    // Pitched blades lean towards the viewer on one side of the hub and
    // away on the other, so each sliver sticks out on one side of the ring.
    let side = v * motor_side;
    let blades = condition.blades();
    for k in 0..blades {
        let theta = blade_angle(k, blades);
        let (lo, hi) = {
            let (a, b) = (0.18 * theta.sin(), 0.88 * theta.sin());
            (a.min(b), a.max(b))
        };
        if u < lo || u > hi {
            continue;
        }
        let lean = theta.cos();
        let reach = 0.035 + 0.05 + 0.05 * lean.abs();
        let inside = if lean > 0.1 {
            (-0.035..reach).contains(&side)
        } else if lean < -0.1 {
            (-reach..0.035).contains(&side)
        } else {
            side.abs() < 0.07
        };
        if inside {
            if k < condition.holes() && (u - HOLE_AT * theta.sin()).abs() < 0.08 && side.abs() > 0.035 {
                return None;
            }
            return Some(SLIVER);
        }
    }
    if v.abs() < 0.06 && u.abs() < 0.18 {
        return Some(HUB);
    }
    None
}

/// Renders the fan as seen from `location`. Images do not depend on the
/// seed; capture noise is added by the field perturbation.
pub fn render(location: Location, condition: Condition) -> Image {
    let r = radius(location.distance);
    let (cy, cx) = (CENTRE.0 + if location.distance == Distance::Far { 40.0 } else { 0.0 }, CENTRE.1);
    let mut img = Image::new(HEIGHT, WIDTH);
    for y in 0..HEIGHT {
        for x in 0..WIDTH {
            let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
            let (dy, dx) = (yf - cy, xf - cx);
            let fan = match location.angle {
                0 => face(dy, dx, r, condition, false),
                180 => face(dy, dx, r, condition, true),
                90 => edge(dy, dx, r, condition, 1.0),
                _ => edge(dy, dx, r, condition, -1.0),
            };
            let pixel = fan.unwrap_or_else(|| {
                let pole = dx.abs() < 0.06 * r && yf > cy && yf < HORIZON + 30.0;
                let base = (yf - (HORIZON + 30.0)).abs() < 0.05 * r && dx.abs() < 0.5 * r;
                if pole || base {
                    STAND
                } else {
                    background(yf)
                }
            });
            img.set_rgb(y, x, pixel);
        }
    }
    img
}
