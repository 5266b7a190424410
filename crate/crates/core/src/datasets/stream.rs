use ndarray::{s, Array2};
use tracing::warn;

use super::{SensorStream, WindowSample};
use crate::{Error, Result};

/// Linear interpolation of `stream` onto a uniform grid at `target_hz`
/// spanning its first to last timestamp.
pub fn resample(stream: &SensorStream, target_hz: f64) -> Result<SensorStream> {
    let (first, last) = match (stream.timestamps.first(), stream.timestamps.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => return Err(Error::Parameter(format!("{}: cannot resample an empty stream", stream.modality_id))),
    };
    resample_span(stream, target_hz, first, last)
}

/// Like [`resample`] but on the grid `start, start + 1/hz, ...` up to `end`.
/// `[start, end]` must lie inside the stream's time span.
pub fn resample_span(stream: &SensorStream, target_hz: f64, start: f64, end: f64) -> Result<SensorStream> {
    if !(target_hz > 0.0) || !target_hz.is_finite() {
        return Err(Error::Parameter(format!("target rate must be > 0, got {target_hz}")));
    }
    if stream.len() < 2 {
        return Err(Error::Parameter(format!(
            "{}: need at least 2 samples to interpolate, got {}",
            stream.modality_id,
            stream.len()
        )));
    }
    let ts = &stream.timestamps;
    let (t_first, t_last) = (ts[0], ts[ts.len() - 1]);
    if start < t_first - 1e-9 || end > t_last + 1e-9 || end < start {
        return Err(Error::Parameter(format!(
            "{}: span [{start}, {end}] outside stream [{t_first}, {t_last}]",
            stream.modality_id
        )));
    }
    let n = ((end - start) * target_hz + 1e-9).floor() as usize + 1;
    let channels = stream.channels();
    let mut values = Array2::<f64>::zeros((n, channels));
    let mut timestamps = Vec::with_capacity(n);
    let mut j = 0usize;
    for i in 0..n {
        let t = (start + i as f64 / target_hz).min(t_last);
        while j + 2 < ts.len() && ts[j + 1] < t {
            j += 1;
        }
        let (t0, t1) = (ts[j], ts[j + 1]);
        let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        let a = stream.values.row(j);
        let b = stream.values.row(j + 1);
        for c in 0..channels {
            values[[i, c]] = if w == 0.0 { a[c] } else if w == 1.0 { b[c] } else { a[c] + w * (b[c] - a[c]) };
        }
        timestamps.push(t);
    }
    SensorStream::new(
        stream.modality_id.clone(),
        target_hz,
        timestamps,
        values,
        stream.channel_names.clone(),
    )
}

/// Per frame, moves the joint centroid to the origin. For 2-D skeletons the
/// coordinates are further divided by the skeleton size, the largest
/// per-axis extent of the frame's joints.
pub fn normalize_skeleton(stream: &SensorStream, dims: usize) -> Result<SensorStream> {
    if dims != 2 && dims != 3 {
        return Err(Error::Layout(format!("skeleton dims must be 2 or 3, got {dims}")));
    }
    let channels = stream.channels();
    if channels == 0 || !channels.is_multiple_of(dims) {
        return Err(Error::Layout(format!(
            "{}: {channels} channels is not a multiple of {dims}",
            stream.modality_id
        )));
    }
    let joints = channels / dims;
    let mut values = stream.values.clone();
    for mut frame in values.rows_mut() {
        let mut extent: f64 = 0.0;
        for d in 0..dims {
            let coords = (0..joints).map(|j| frame[j * dims + d]);
            let centroid = coords.clone().sum::<f64>() / joints as f64;
            let (lo, hi) = coords.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            extent = extent.max(hi - lo);
            for j in 0..joints {
                frame[j * dims + d] -= centroid;
            }
        }
        if dims == 2 && extent > 0.0 {
            frame.mapv_inplace(|v| v / extent);
        }
    }
    SensorStream::new(
        stream.modality_id.clone(),
        stream.rate_hz,
        stream.timestamps.clone(),
        values,
        stream.channel_names.clone(),
    )
}

/// Fixed-length windows every `step_s` seconds while a full window fits.
///
/// Window and step lengths are rounded to whole samples at the stream rate.
/// A window longer than the stream yields an empty list.
pub fn slide_windows(stream: &SensorStream, window_s: f64, step_s: f64) -> Result<Vec<WindowSample>> {
    if !(window_s > 0.0) || !(step_s > 0.0) {
        return Err(Error::Parameter(format!(
            "window ({window_s}) and step ({step_s}) must be > 0"
        )));
    }
    let window = (window_s * stream.rate_hz).round() as usize;
    let step = ((step_s * stream.rate_hz).round() as usize).max(1);
    if window == 0 {
        return Err(Error::Parameter(format!("window of {window_s} s is shorter than one sample")));
    }
    let total = stream.len();
    if window > total {
        warn!(modality = %stream.modality_id, window, total, "window longer than stream; no windows produced");
        return Ok(Vec::new());
    }
    let count = (total - window) / step + 1;
    Ok((0..count)
        .map(|k| {
            let start = k * step;
            WindowSample {
                modality_id: stream.modality_id.clone(),
                start_time: stream.timestamps[start],
                data: stream.values.slice(s![start..start + window, ..]).mapv(|v| v as f32),
                label: None,
            }
        })
        .collect())
}
