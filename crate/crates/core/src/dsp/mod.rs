//! Audio and image preprocessing into network-ready `3 x 120 x 160` tensors.

mod colormap;

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::tensor::{read_container, write_container, NamedTensor, Tensor, TensorError, CACHE_MAGIC};

pub use colormap::RAMP;

pub const SAMPLE_RATE: u32 = 16_000;
pub const CLIP_SECONDS: u32 = 5;
pub const FRAME_LEN: usize = 1024;
pub const HOP_LEN: usize = 512;
pub const N_MELS: usize = 64;
pub const F_MIN: f64 = 20.0;
pub const DB_RANGE: f64 = 80.0;
pub const OUT_HEIGHT: usize = 120;
pub const OUT_WIDTH: usize = 160;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("frequency must be non-negative, got {0}")]
    NegativeFrequency(f64),
    #[error("waveform of {len} samples is shorter than one frame of {frame}")]
    TooShort { len: usize, frame: usize },
    #[error("invalid frequency bounds: need 0 <= fmin < fmax <= {nyquist}, got {fmin}..{fmax}")]
    FrequencyBounds { fmin: f64, fmax: f64, nyquist: f64 },
    #[error("invalid frame parameters: frame {frame}, hop {hop}")]
    Framing { frame: usize, hop: usize },
    #[error("image must be 3 x H x W with H, W >= 2, got {0:?}")]
    Degenerate(Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = DspError> = std::result::Result<T, E>;

pub fn hz_to_mel(hz: f64) -> Result<f64> {
    if hz < 0.0 || hz.is_nan() {
        return Err(DspError::NegativeFrequency(hz));
    }
    Ok(2595.0 * (1.0 + hz / 700.0).log10())
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    Rectangular,
    /// Periodic Hann, `0.5 - 0.5 cos(2 pi n / N)`.
    Hann,
}

impl Window {
    pub fn coefficients(self, len: usize) -> Vec<f32> {
        match self {
            Window::Rectangular => vec![1.0; len],
            Window::Hann => (0..len)
                .map(|n| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos()) as f32)
                .collect(),
        }
    }
}

/// Forward/inverse complex FFT pair of a fixed length.
pub struct FftPair {
    len: usize,
    forward: Arc<dyn Fft<f32>>,
    inverse: Arc<dyn Fft<f32>>,
}

impl FftPair {
    pub fn new(len: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            len,
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
        }
    }

    pub fn spectrum(&self, frame: &[f32]) -> Vec<Complex<f32>> {
        assert_eq!(frame.len(), self.len, "frame length");
        let mut buf: Vec<Complex<f32>> = frame.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        buf
    }

    /// Inverse transform scaled by `1/N`, keeping the real part.
    pub fn real_inverse(&self, spectrum: &[Complex<f32>]) -> Vec<f32> {
        assert_eq!(spectrum.len(), self.len, "spectrum length");
        let mut buf = spectrum.to_vec();
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.len as f32;
        buf.into_iter().map(|c| c.re * scale).collect()
    }
}

/// Magnitude spectrogram stored bin-major: `magnitudes[bin * frames + t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub magnitudes: Vec<f32>,
    pub bins: usize,
    pub frames: usize,
    pub frame_len: usize,
    pub hop_len: usize,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn at(&self, bin: usize, frame: usize) -> f32 {
        self.magnitudes[bin * self.frames + frame]
    }
}

pub fn frame_count(len: usize, frame_len: usize, hop_len: usize) -> usize {
    1 + (len - frame_len) / hop_len
}

/// One-sided magnitude STFT without centering or padding.
pub fn stft(wave: &[f32], frame_len: usize, hop_len: usize, window: Window, sample_rate: u32) -> Result<Spectrogram> {
    if frame_len == 0 || hop_len == 0 {
        return Err(DspError::Framing {
            frame: frame_len,
            hop: hop_len,
        });
    }
    if wave.len() < frame_len {
        return Err(DspError::TooShort {
            len: wave.len(),
            frame: frame_len,
        });
    }
    let frames = frame_count(wave.len(), frame_len, hop_len);
    let bins = frame_len / 2 + 1;
    let win = window.coefficients(frame_len);
    let fft = FftPair::new(frame_len);
    let mut magnitudes = vec![0.0f32; bins * frames];
    let mut frame = vec![0.0f32; frame_len];
    for t in 0..frames {
        let start = t * hop_len;
        for (dst, (&x, &w)) in frame.iter_mut().zip(wave[start..start + frame_len].iter().zip(&win)) {
            *dst = x * w;
        }
        for (bin, c) in fft.spectrum(&frame).into_iter().take(bins).enumerate() {
            magnitudes[bin * frames + t] = c.norm();
        }
    }
    Ok(Spectrogram {
        magnitudes,
        bins,
        frames,
        frame_len,
        hop_len,
        sample_rate,
    })
}

/// Triangular filters with unit peaks and centres equally spaced in mel,
/// shape `[n_mels][frame_len / 2 + 1]`. Adjacent triangles overlap so that
/// every bin's total weight is at most 1.
pub fn mel_filterbank(n_mels: usize, frame_len: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Result<Vec<Vec<f32>>> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(fmin >= 0.0 && fmin < fmax && fmax <= nyquist) {
        return Err(DspError::FrequencyBounds { fmin, fmax, nyquist });
    }
    let (lo, hi) = (hz_to_mel(fmin)?, hz_to_mel(fmax)?);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bins = frame_len / 2 + 1;
    let bin_hz = |k: usize| k as f64 * sample_rate as f64 / frame_len as f64;
    Ok((0..n_mels)
        .map(|m| {
            let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = bin_hz(k);
                    let up = (f - left) / (centre - left);
                    let down = (right - f) / (right - centre);
                    up.min(down).max(0.0) as f32
                })
                .collect()
        })
        .collect())
}

/// Mel band energies in dB, shape `[n_mels][frames]`, clipped to
/// `[max - 80, max]`.
pub fn mel_db(wave: &[f32], sample_rate: u32, n_mels: usize, fmin: f64, fmax: f64) -> Result<Vec<Vec<f64>>> {
    let spec = stft(wave, FRAME_LEN, HOP_LEN, Window::Hann, sample_rate)?;
    let bank = mel_filterbank(n_mels, FRAME_LEN, sample_rate, fmin, fmax)?;
    let mut db: Vec<Vec<f64>> = bank
        .iter()
        .map(|filter| {
            (0..spec.frames)
                .map(|t| {
                    let energy: f64 = filter
                        .iter()
                        .enumerate()
                        .filter(|(_, &w)| w > 0.0)
                        .map(|(k, &w)| w as f64 * (spec.at(k, t) as f64).powi(2))
                        .sum();
                    10.0 * energy.max(1e-10).log10()
                })
                .collect()
        })
        .collect();
    let top = db.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    for v in db.iter_mut().flatten() {
        *v = v.max(top - DB_RANGE);
    }
    Ok(db)
}

/// Channel-major 8-bit RGB image, `data[(c * height + y) * width + x]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; 3 * height * width],
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * height * width || height < 2 || width < 2 {
            return Err(DspError::Degenerate(vec![data.len() / (height * width).max(1), height, width]));
        }
        Ok(Self { height, width, data })
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set_rgb(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let plane = self.height * self.width;
        let i = y * self.width + x;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * plane + i] = v;
        }
    }
}

/// Renders a Mel spectrogram as a colour image: rows are mel bands with the
/// lowest band at the bottom, columns are frames.
pub fn mel_spectrogram(wave: &[f32], sample_rate: u32, n_mels: usize, fmin: f64, fmax: f64) -> Result<Image> {
    let db = mel_db(wave, sample_rate, n_mels, fmin, fmax)?;
    let frames = db[0].len();
    let top = db.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let floor = top - DB_RANGE;
    let mut img = Image::new(n_mels, frames);
    for (band, row) in db.iter().enumerate() {
        let y = n_mels - 1 - band;
        for (x, &v) in row.iter().enumerate() {
            let level = ((v - floor) / DB_RANGE * 255.0).round().clamp(0.0, 255.0) as usize;
            img.set_rgb(y, x, RAMP[level]);
        }
    }
    Ok(img)
}

/// Half-pixel-centred bilinear resize of a `channels x h x w` plane stack.
pub fn resize_bilinear(src: &[f32], channels: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (pos - i0 as f64) as f32)
            })
            .collect()
    };
    let (ys, xs) = (axis(out_h, h), axis(out_w, w));
    let mut out = Vec::with_capacity(channels * out_h * out_w);
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// Bilinear resize to 120 x 160 followed by division by 255.
pub fn resize_normalize(img: &Image) -> Result<Tensor> {
    if img.height < 2 || img.width < 2 || img.data.len() != 3 * img.height * img.width {
        return Err(DspError::Degenerate(vec![3, img.height, img.width]));
    }
    let src: Vec<f32> = img.data.iter().map(|&v| v as f32).collect();
    let data = if (img.height, img.width) == (OUT_HEIGHT, OUT_WIDTH) {
        src
    } else {
        resize_bilinear(&src, 3, img.height, img.width, OUT_HEIGHT, OUT_WIDTH)
    };
    let data = data.into_iter().map(|v| (v / 255.0).clamp(0.0, 1.0)).collect();
    Ok(Tensor::new(vec![3, OUT_HEIGHT, OUT_WIDTH], data)?)
}

/// Downsamples a `C x H x W` tensor, e.g. for cheaper Q-network inputs.
pub fn downsample(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 3 || s[1] < 1 || s[2] < 1 {
        return Err(DspError::Degenerate(s.to_vec()));
    }
    if (s[1], s[2]) == (out_h, out_w) {
        return Ok(t.clone());
    }
    let data = resize_bilinear(t.data(), s[0], s[1], s[2], out_h, out_w);
    Ok(Tensor::new(vec![s[0], out_h, out_w], data)?)
}

pub fn preprocess_audio(wave: &[f32], sample_rate: u32) -> Result<Tensor> {
    let img = mel_spectrogram(wave, sample_rate, N_MELS, F_MIN, sample_rate as f64 / 2.0)?;
    resize_normalize(&img)
}

pub fn preprocess_image(img: &Image) -> Result<Tensor> {
    resize_normalize(img)
}

/// Writes preprocessed tensors to a cache file in the `HDLT` container.
pub fn write_cache(path: &Path, entries: &[NamedTensor]) -> Result<()> {
    let mut buf = Vec::new();
    write_container(&mut buf, CACHE_MAGIC, entries)?;
    std::fs::write(path, buf).map_err(TensorError::from)?;
    Ok(())
}

pub fn read_cache(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = std::fs::read(path).map_err(TensorError::from)?;
    Ok(read_container(&mut bytes.as_slice(), CACHE_MAGIC)?)
}
