use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use codedlf::CentralView;
use serde_json::{Map, Value};

use crate::{CliError, CliResult};

/// Serialize `report` with a trailing newline. Object reports gain a
/// `timestamp_unix` field unless `no_timestamp` is set.
pub fn render_json(mut report: Value, no_timestamp: bool) -> CliResult<String> {
    if let (false, Value::Object(map)) = (no_timestamp, &mut report) {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        map.insert("timestamp_unix".into(), Value::from(secs));
    }
    let mut s = serde_json::to_string_pretty(&report).map_err(|e| CliError::Validation(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json(path: &Path, report: Value, no_timestamp: bool) -> CliResult<()> {
    std::fs::write(path, render_json(report, no_timestamp)?)?;
    Ok(())
}

/// JSON number, or the strings `"inf"`, `"-inf"`, `"nan"` for values JSON
/// cannot represent.
pub fn number(x: f64) -> Value {
    if x.is_finite() {
        Value::from(x)
    } else if x.is_nan() {
        Value::from("nan")
    } else if x > 0.0 {
        Value::from("inf")
    } else {
        Value::from("-inf")
    }
}

pub fn object(pairs: impl IntoIterator<Item = (&'static str, Value)>) -> Value {
    Value::Object(pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect::<Map<_, _>>())
}

/// Channels `(Λ−1, Λ/2, 0)` of a central view as 8-bit RGB.
pub fn preview_rgb(cv: &CentralView) -> (u32, u32, Vec<u8>) {
    let [s, t, l] = cv.dims();
    let chans = [l - 1, l / 2, 0];
    // Linear map of [0, max] onto [0, 255]; a non-positive max gives black.
    let max = chans
        .iter()
        .flat_map(|&c| (0..s * t).map(move |p| cv.get(p / t, p % t, c)))
        .fold(0.0f32, f32::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut rgb = Vec::with_capacity(s * t * 3);
    for p in 0..s * t {
        for &c in &chans {
            rgb.push((cv.get(p / t, p % t, c) * scale).round().clamp(0.0, 255.0) as u8);
        }
    }
    (t as u32, s as u32, rgb)
}

pub fn write_preview(cv: &CentralView, path: &Path) -> CliResult<()> {
    let (w, h, rgb) = preview_rgb(cv);
    image::RgbImage::from_raw(w, h, rgb)
        .expect("buffer sized to the image")
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| CliError::Validation(format!("png preview: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_finite_numbers_become_strings() {
        assert_eq!(number(f64::INFINITY), Value::from("inf"));
        assert_eq!(number(f64::NEG_INFINITY), Value::from("-inf"));
        assert_eq!(number(1.5), Value::from(1.5));
    }

    #[test]
    fn timestamp_only_when_requested() {
        let r = object([("a", Value::from(1))]);
        assert!(!render_json(r.clone(), true).unwrap().contains("timestamp"));
        assert!(render_json(r, false).unwrap().contains("timestamp_unix"));
    }

    #[test]
    fn preview_channel_order_and_scaling() {
        // Λ = 3: red from channel 2, green from channel 1, blue from channel 0.
        let cv = CentralView::from_vec([1, 2, 3], vec![0.0, 0.5, 1.0, 0.25, 0.0, 0.0]).unwrap();
        let (w, h, rgb) = preview_rgb(&cv);
        assert_eq!((w, h), (2, 1));
        assert_eq!(rgb, vec![255, 128, 0, 0, 0, 64]);
    }
}
