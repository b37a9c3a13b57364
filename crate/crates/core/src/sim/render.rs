use serde::{Deserialize, Serialize};

use super::world::{Anchor, Env, WorldState};
use crate::error::{Error, Result};

pub const BACKGROUND: [u8; 3] = [235, 235, 235];
pub const GRIPPER: [u8; 3] = [20, 20, 20];

/// Row-major `height x width x channels` RGB frame. Intensities are stored as
/// 8-bit levels and read as values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            channels: 3,
            data,
        }
    }

    /// Intensities of pixel `(u, v)` in `[0, 1]`.
    pub fn pixel(&self, u: usize, v: usize) -> [f64; 3] {
        let i = (v * self.width + u) * self.channels;
        [0, 1, 2].map(|c| self.data[i + c] as f64 / 255.0)
    }

    pub fn set(&mut self, u: usize, v: usize, rgb: [u8; 3]) {
        let i = (v * self.width + u) * self.channels;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Average-pools non-overlapping `factor x factor` windows.
    pub fn pooled(&self, factor: usize) -> Vec<f64> {
        let (w, h, c) = (self.width / factor, self.height / factor, self.channels);
        let mut out = vec![0.0; w * h * c];
        let norm = 1.0 / (255 * factor * factor) as f64;
        for v in 0..h * factor {
            for u in 0..w * factor {
                let o = ((v / factor) * w + u / factor) * c;
                let i = (v * self.width + u) * c;
                for k in 0..c {
                    out[o + k] += self.data[i + k] as f64 * norm;
                }
            }
        }
        out
    }

    /// Encodes as an 8-bit RGB PNG.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
            writer
                .write_image_data(&self.data)
                .map_err(|e| Error::Image(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = decoder.read_info().map_err(|e| Error::Image(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Image(e.to_string()))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Image("expected 8-bit RGB".into()));
        }
        let data = buf[..info.buffer_size()].to_vec();
        Ok(Self {
            width: info.width as usize,
            height: info.height as usize,
            channels: 3,
            data,
        })
    }
}

/// Binary per-pixel mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn get(&self, u: usize, v: usize) -> bool {
        self.bits[v * self.width + u]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Shape("mask dimensions differ".into()));
        }
        Ok(Mask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        })
    }

    /// Packs the bits (row-major, MSB first) for compact storage.
    pub fn to_packed(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, _) in self.bits.iter().enumerate().filter(|(_, b)| **b) {
            out[i / 8] |= 0x80 >> (i % 8);
        }
        out
    }

    pub fn from_packed(width: usize, height: usize, packed: &[u8]) -> Result<Self> {
        let n = width * height;
        if packed.len() != n.div_ceil(8) {
            return Err(Error::Shape("packed mask has the wrong length".into()));
        }
        let bits = (0..n).map(|i| packed[i / 8] & (0x80 >> (i % 8)) != 0).collect();
        Ok(Self {
            width,
            height,
            bits,
        })
    }
}

/// Pixel coordinates covered by the gripper sprite: a square outline whose
/// radius shrinks when the gripper closes.
pub fn gripper_sprite(pos: [f64; 2], closed: bool, scale: f64, size: usize) -> Vec<(usize, usize)> {
    let cu = ((pos[0] * scale).floor() as i64).clamp(0, size as i64 - 1);
    let cv = ((pos[1] * scale).floor() as i64).clamp(0, size as i64 - 1);
    let r: i64 = if closed { 1 } else { 2 };
    let mut px = Vec::with_capacity(8 * r as usize);
    for dv in -r..=r {
        for du in -r..=r {
            if du.abs().max(dv.abs()) != r {
                continue;
            }
            let (u, v) = (cu + du, cv + dv);
            if (0..size as i64).contains(&u) && (0..size as i64).contains(&v) {
                px.push((u as usize, v as usize));
            }
        }
    }
    px
}

/// Pixels whose centers fall strictly inside the square of half-size `half` at `center`.
pub fn square_pixels(center: [f64; 2], half: f64, scale: f64, size: usize) -> Vec<(usize, usize)> {
    let lo = |c: f64| (((c - half) * scale - 0.5).floor().max(0.0)) as usize;
    let hi = |c: f64| ((((c + half) * scale + 0.5).ceil()) as usize).min(size);
    let mut px = Vec::new();
    for v in lo(center[1])..hi(center[1]) {
        let cy = (v as f64 + 0.5) / scale;
        if (cy - center[1]).abs() >= half {
            continue;
        }
        for u in lo(center[0])..hi(center[0]) {
            let cx = (u as f64 + 0.5) / scale;
            if (cx - center[0]).abs() < half {
                px.push((u, v));
            }
        }
    }
    px
}

/// Draw order: fixtures, free objects, placed stacks by height, then whatever
/// the gripper holds.
fn draw_level(env: &Env, state: &WorldState, id: usize, depth: usize) -> usize {
    if depth > state.objects.len() {
        return 1;
    }
    if state.held_object == Some(id) {
        return 1000;
    }
    match state.objects[id].placed_on {
        Some(Anchor::Object(t)) => draw_level(env, state, t, depth + 1) + 1,
        Some(Anchor::Site(_)) => 1,
        None if !env.task.objects[id].graspable => 0,
        None => 1,
    }
}

pub fn render(env: &Env, state: &WorldState) -> (Image, Mask) {
    let size = env.cfg.image_size;
    let scale = env.scale();
    let mut img = Image::filled(size, size, BACKGROUND);
    for site in &env.task.sites {
        for (u, v) in square_pixels(site.pos, site.half_size, scale, size) {
            img.set(u, v, site.color.rgb());
        }
    }
    let mut order: Vec<(usize, usize)> = state
        .objects
        .iter()
        .map(|o| (draw_level(env, state, o.id, 0), o.id))
        .collect();
    order.sort_unstable();
    for (_, id) in order {
        let spec = &env.task.objects[id];
        for (u, v) in square_pixels(state.objects[id].pos, spec.half_size, scale, size) {
            img.set(u, v, spec.color.rgb());
        }
    }
    let mut mask = Mask::empty(size, size);
    for (u, v) in gripper_sprite(state.gripper_pos, state.gripper_closed, scale, size) {
        img.set(u, v, GRIPPER);
        mask.bits[v * size + u] = true;
    }
    (img, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SimConfig;
    use crate::sim::TaskSpec;

    fn bare_env() -> Env {
        let mut task = TaskSpec::blockstack4();
        // Park every object far outside the frame to get an empty scene.
        for o in &mut task.objects {
            o.spawn.min = [500.0, 500.0];
            o.spawn.max = [500.0, 500.0];
        }
        Env::new(task, SimConfig::default()).unwrap()
    }

    #[test]
    fn empty_scene_mask_is_the_sprite() {
        let env = bare_env();
        let (mut s, _, _) = env.reset(0);
        // Brute-force count of the open outline (radius 2) clipped at the corner.
        s.gripper_pos = [0.0, 0.0];
        let (img, mask) = render(&env, &s);
        let mut expect = 0;
        for dv in -2i64..=2 {
            for du in -2i64..=2 {
                if du.abs().max(dv.abs()) == 2 && du >= 0 && dv >= 0 {
                    expect += 1;
                }
            }
        }
        assert_eq!(mask.count(), expect);
        s.gripper_pos = [16.0, 16.0];
        let (_, mask) = render(&env, &s);
        assert_eq!(mask.count(), 16);
        s.gripper_closed = true;
        let (_, mask) = render(&env, &s);
        assert_eq!(mask.count(), 8);
        assert!((0..64).all(|v| (0..64).all(|u| img.pixel(u, v).iter().all(|x| (0.0..=1.0).contains(x)))));
    }

    #[test]
    fn mask_covers_exactly_the_gripper_pixels() {
        let env = Env::new(TaskSpec::blockstack4(), SimConfig::default()).unwrap();
        for seed in 0..20 {
            let (s, obs, mask) = env.reset(seed);
            let sprite = gripper_sprite(s.gripper_pos, s.gripper_closed, env.scale(), 64);
            let mut expect = Mask::empty(64, 64);
            for (u, v) in sprite {
                expect.bits[v * 64 + u] = true;
                let g = GRIPPER.map(|c| c as f64 / 255.0);
                assert_eq!(obs.image.pixel(u, v), g);
            }
            assert_eq!(mask, expect);
        }
    }

    #[test]
    fn renders_are_deterministic() {
        let env = Env::new(TaskSpec::pack2(), SimConfig::default()).unwrap();
        let (s, _, _) = env.reset(11);
        assert_eq!(render(&env, &s), render(&env, &s));
    }

    #[test]
    fn held_object_pixels_are_not_masked() {
        let env = Env::new(TaskSpec::blockstack4(), SimConfig::default()).unwrap();
        let (mut s, _, _) = env.reset(1);
        let red = env.task.object_index("red").unwrap();
        s.gripper_pos = s.objects[red].pos;
        let s = env.step(&s, &[0.0, 0.0, 1.0]).unwrap().state;
        let (img, mask) = render(&env, &s);
        let red_rgb = crate::sim::Color::Red.rgb().map(|c| c as f64 / 255.0);
        let visible = (0..64)
            .flat_map(|v| (0..64).map(move |u| (u, v)))
            .filter(|&(u, v)| img.pixel(u, v) == red_rgb)
            .count();
        assert!(visible > 20, "held block should stay visible ({visible} px)");
        assert_eq!(mask.count(), 8);
    }

    #[test]
    fn png_round_trip_is_exact() {
        let env = Env::new(TaskSpec::pack2(), SimConfig::default()).unwrap();
        let (_, obs, _) = env.reset(2);
        let back = Image::from_png(&obs.image.to_png().unwrap()).unwrap();
        assert_eq!(back, obs.image);
    }

    #[test]
    fn packed_mask_round_trip() {
        let env = Env::new(TaskSpec::pack2(), SimConfig::default()).unwrap();
        let (_, _, mask) = env.reset(2);
        assert_eq!(Mask::from_packed(64, 64, &mask.to_packed()).unwrap(), mask);
    }
}
