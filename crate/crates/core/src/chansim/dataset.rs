use std::sync::Arc;

use super::{AdcFrame, Sector, TrackEnsemble, PAD_BIT};
use crate::{Error, Result};

/// Normalized samples of both readers plus the center-track bits of one sector,
/// held at archive precision (f32).
#[derive(Debug, Clone, PartialEq)]
pub struct SectorSamples {
    pub readers: [Vec<f64>; 2],
    pub bits: Vec<i8>,
}

impl SectorSamples {
    pub fn from_frame(frame: &AdcFrame, tracks: &TrackEnsemble) -> Result<Self> {
        if !frame.normalized {
            return Err(Error::InvalidParameter("windowing expects normalized frames".into()));
        }
        if frame.len() != tracks.len() {
            return Err(Error::LengthMismatch(format!(
                "frame has {} samples, tracks have {} bits",
                frame.len(),
                tracks.len()
            )));
        }
        let round = |v: &Vec<f64>| v.iter().map(|&x| f64::from(x as f32)).collect();
        Ok(Self {
            readers: [round(&frame.samples[0]), round(&frame.samples[1])],
            bits: tracks.center().to_vec(),
        })
    }

    pub fn from_sector(sector: &Sector) -> Result<Self> {
        Self::from_frame(&sector.frame, &sector.tracks)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Center-track bit `n`, with the write padding outside the sector.
    pub fn bit(&self, n: i64) -> i8 {
        if n < 0 || n >= self.bits.len() as i64 {
            PAD_BIT
        } else {
            self.bits[n as usize]
        }
    }
}

/// One equalizer input: `D_in` samples of each reader centred on `center`.
#[derive(Debug, Clone, Copy)]
pub struct Window<'a> {
    pub sector: usize,
    pub center: usize,
    pub label: i8,
    half: usize,
    data: &'a SectorSamples,
}

impl Window<'_> {
    /// Writes reader-1 samples followed by reader-2 samples into `out` (length `2·D_in`).
    pub fn write_input(&self, out: &mut [f64]) {
        let d_in = 2 * self.half + 1;
        let lo = self.center - self.half;
        out[..d_in].copy_from_slice(&self.data.readers[0][lo..lo + d_in]);
        out[d_in..2 * d_in].copy_from_slice(&self.data.readers[1][lo..lo + d_in]);
    }

    pub fn input(&self) -> Vec<f64> {
        let mut v = vec![0.0; 2 * (2 * self.half + 1)];
        self.write_input(&mut v);
        v
    }
}

/// Sliding-window view over a set of sectors.
///
/// Window `i` of a sector is centred on sample `k = i + (D_in − 1)/2` and is
/// labelled with bit `k − delay`; that bit is the current input of trellis
/// stage `i`. Windows never extend past the sector, so each sector yields
/// `N_s − D_in + 1` of them.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    sectors: Arc<Vec<SectorSamples>>,
    d_in: usize,
    delay: i64,
}

impl WindowedDataset {
    pub fn new(frames: &[AdcFrame], tracks: &[TrackEnsemble], d_in: usize, delay: i64) -> Result<Self> {
        if frames.len() != tracks.len() {
            return Err(Error::LengthMismatch("one track ensemble per frame is required".into()));
        }
        let sectors = frames
            .iter()
            .zip(tracks)
            .map(|(f, t)| SectorSamples::from_frame(f, t))
            .collect::<Result<Vec<_>>>()?;
        Self::from_sectors(Arc::new(sectors), d_in, delay)
    }

    pub fn from_sectors(sectors: Arc<Vec<SectorSamples>>, d_in: usize, delay: i64) -> Result<Self> {
        if d_in == 0 || d_in % 2 == 0 {
            return Err(Error::InvalidParameter(format!("D_in must be odd, got {d_in}")));
        }
        let half = (d_in - 1) / 2;
        if delay.unsigned_abs() as usize > half {
            return Err(Error::InvalidParameter(format!(
                "decision delay {delay} exceeds window half-width {half}"
            )));
        }
        for s in sectors.iter() {
            if d_in > s.len() {
                return Err(Error::WindowTooLong { d_in, len: s.len() });
            }
            if s.readers.iter().any(|r| r.len() != s.len()) {
                return Err(Error::LengthMismatch("reader streams and bits differ in length".into()));
            }
        }
        Ok(Self { sectors, d_in, delay })
    }

    /// Same sectors, different window geometry.
    pub fn rewindow(&self, d_in: usize, delay: i64) -> Result<Self> {
        Self::from_sectors(self.sectors.clone(), d_in, delay)
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn delay(&self) -> i64 {
        self.delay
    }

    pub fn half(&self) -> usize {
        (self.d_in - 1) / 2
    }

    pub fn n_sectors(&self) -> usize {
        self.sectors.len()
    }

    pub fn sectors(&self) -> &[SectorSamples] {
        &self.sectors
    }

    pub fn sector(&self, s: usize) -> &SectorSamples {
        &self.sectors[s]
    }

    pub fn windows_per_sector(&self, s: usize) -> usize {
        self.sectors[s].len() - self.d_in + 1
    }

    pub fn len(&self) -> usize {
        (0..self.n_sectors()).map(|s| self.windows_per_sector(s)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bit index decided at stage `i` of sector detection.
    pub fn stage_bit_index(&self, i: usize) -> i64 {
        (i + self.half()) as i64 - self.delay
    }

    pub fn window(&self, s: usize, i: usize) -> Window<'_> {
        let data = &self.sectors[s];
        let center = i + self.half();
        Window {
            sector: s,
            center,
            label: data.bit(center as i64 - self.delay),
            half: self.half(),
            data,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Window<'_>> + '_ {
        (0..self.n_sectors()).flat_map(move |s| (0..self.windows_per_sector(s)).map(move |i| self.window(s, i)))
    }

    /// Center-track bits decided at stages `range` of sector `s`, with `history`
    /// extra bits before the first stage (oldest first).
    pub fn stage_bits(&self, s: usize, range: std::ops::Range<usize>, history: usize) -> Vec<i8> {
        let data = &self.sectors[s];
        let first = self.stage_bit_index(range.start) - history as i64;
        let last = self.stage_bit_index(range.end);
        (first..last).map(|n| data.bit(n)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> SectorSamples {
        SectorSamples {
            readers: [(0..n).map(|i| i as f64).collect(), (0..n).map(|i| -(i as f64)).collect()],
            bits: (0..n).map(|i| if i % 3 == 0 { 1 } else { -1 }).collect(),
        }
    }

    #[test]
    fn window_counts() {
        let ds = WindowedDataset::from_sectors(Arc::new(vec![toy(39_512)]), 11, 0).unwrap();
        assert_eq!(ds.len(), 39_502);
        let ds = WindowedDataset::from_sectors(Arc::new(vec![toy(50); 100]), 1, 0).unwrap();
        assert_eq!(ds.len(), 5_000);
    }

    #[test]
    fn window_contents_and_label() {
        let ds = WindowedDataset::from_sectors(Arc::new(vec![toy(20)]), 5, -1).unwrap();
        let w = ds.window(0, 0);
        assert_eq!(w.center, 2);
        assert_eq!(w.input(), vec![0.0, 1.0, 2.0, 3.0, 4.0, 0.0, -1.0, -2.0, -3.0, -4.0]);
        assert_eq!(w.label, 1); // bit 3
        assert_eq!(ds.stage_bit_index(0), 3);
        assert_eq!(ds.stage_bits(0, 0..2, 3), vec![1, -1, -1, 1, -1]);
    }

    #[test]
    fn window_errors() {
        assert!(matches!(
            WindowedDataset::from_sectors(Arc::new(vec![toy(5)]), 7, 0),
            Err(Error::WindowTooLong { .. })
        ));
        assert!(WindowedDataset::from_sectors(Arc::new(vec![toy(50)]), 4, 0).is_err());
        assert!(WindowedDataset::from_sectors(Arc::new(vec![toy(50)]), 5, 3).is_err());
    }
}
