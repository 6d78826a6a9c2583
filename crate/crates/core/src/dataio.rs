//! Loading, normalization, windowing and train/validation splitting of raw
//! multivariate series.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A T×d matrix of real observations, one row per timestamp.
#[derive(Clone, Debug)]
pub struct RawSeries {
    pub values: Array2<f64>,
    pub channel_names: Option<Vec<String>>,
}

impl RawSeries {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }
}

/// Binary ground-truth labels for the test split, one per timestamp.
#[derive(Clone, Debug)]
pub struct LabelSeries {
    pub labels: Vec<u8>,
}

/// Per-channel min/max fitted on training data only.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

/// A batch of sliding windows: `windows[i]` covers original timestamps
/// `[end_indices[i] + 1 - w, end_indices[i]]`.
#[derive(Clone, Debug)]
pub struct WindowBatch {
    pub windows: Array3<f64>,
    pub end_indices: Vec<usize>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.windows.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn window_len(&self) -> usize {
        self.windows.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.windows.shape()[2]
    }

    /// Select windows by index, preserving the given order.
    pub fn subset(&self, idx: &[usize]) -> WindowBatch {
        let (w, d) = (self.window_len(), self.channels());
        let mut windows = Array3::zeros((idx.len(), w, d));
        let mut end_indices = Vec::with_capacity(idx.len());
        for (row, &i) in idx.iter().enumerate() {
            windows
                .index_axis_mut(Axis(0), row)
                .assign(&self.windows.index_axis(Axis(0), i));
            end_indices.push(self.end_indices[i]);
        }
        WindowBatch {
            windows,
            end_indices,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeriesFormat {
    /// Comma-separated text, one row per timestamp, optional header row.
    Csv,
    /// Whitespace-separated text, one row per timestamp, optional header row.
    SpaceSeparated,
    /// Flat little-endian float32 matrix with a sidecar `<path>.shape`
    /// descriptor holding "T d".
    BinaryF32,
}

impl SeriesFormat {
    /// Guess the format: a `.shape` sidecar marks the binary layout, a
    /// comma in the first line marks comma-separated text, anything else is
    /// whitespace-separated.
    pub fn detect(path: &Path) -> SeriesFormat {
        if Path::new(&format!("{}.shape", path.display())).exists() {
            return SeriesFormat::BinaryF32;
        }
        if path.extension().is_some_and(|e| e == "csv") {
            return SeriesFormat::Csv;
        }
        use std::io::{BufRead, BufReader};
        if let Ok(f) = fs::File::open(path) {
            let mut line = String::new();
            if BufReader::new(f).read_line(&mut line).is_ok() && line.contains(',') {
                return SeriesFormat::Csv;
            }
        }
        SeriesFormat::SpaceSeparated
    }
}

fn looks_numeric(tok: &str) -> bool {
    tok.parse::<f64>().is_ok()
}

fn parse_delimited(path: &Path, text: &str, comma: bool) -> Result<RawSeries> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut channel_names = None;
    let mut width = None;
    let mut data_row = 0usize;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = if comma {
            line.split(',').map(str::trim).collect()
        } else {
            line.split_whitespace().collect()
        };
        // a non-numeric first row is treated as a header of channel names
        if rows.is_empty() && channel_names.is_none() && !toks.iter().all(|t| looks_numeric(t)) {
            channel_names = Some(toks.iter().map(|s| s.to_string()).collect());
            continue;
        }
        data_row += 1;
        if let Some(w) = width {
            if toks.len() != w {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row: lineno + 1,
                    col: toks.len().min(w) + 1,
                    msg: format!("expected {w} columns, found {}", toks.len()),
                });
            }
        } else {
            width = Some(toks.len());
        }
        let mut row = Vec::with_capacity(toks.len());
        for (col, tok) in toks.iter().enumerate() {
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                row: lineno + 1,
                col: col + 1,
                msg: format!("not a number: {tok:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Validation(format!(
                    "non-finite value at {}:{}:{} (data row {data_row})",
                    path.display(),
                    lineno + 1,
                    col + 1
                )));
            }
            row.push(v);
        }
        rows.push(row);
    }
    let t = rows.len();
    let d = width.ok_or_else(|| Error::Validation(format!("{}: empty series", path.display())))?;
    if t == 0 {
        return Err(Error::Validation(format!(
            "{}: no data rows",
            path.display()
        )));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let values = Array2::from_shape_vec((t, d), flat).expect("row widths checked");
    Ok(RawSeries {
        values,
        channel_names,
    })
}

fn parse_binary(path: &Path) -> Result<RawSeries> {
    let shape_path = format!("{}.shape", path.display());
    let descr = fs::read_to_string(&shape_path).map_err(|e| Error::io(&shape_path, e))?;
    let dims: Vec<usize> = descr
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Validation(format!("{shape_path}: bad descriptor {descr:?}")))
        })
        .collect::<Result<_>>()?;
    let [t, d] = dims[..] else {
        return Err(Error::Validation(format!(
            "{shape_path}: descriptor must be \"T d\""
        )));
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != t * d * 4 {
        return Err(Error::Validation(format!(
            "{}: expected {} bytes for {t}x{d} f32 matrix, found {}",
            path.display(),
            t * d * 4,
            bytes.len()
        )));
    }
    let mut flat = Vec::with_capacity(t * d);
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        if !v.is_finite() {
            return Err(Error::Validation(format!(
                "non-finite value at {} element {} (row {}, col {})",
                path.display(),
                i,
                i / d + 1,
                i % d + 1
            )));
        }
        flat.push(v);
    }
    Ok(RawSeries {
        values: Array2::from_shape_vec((t, d), flat).unwrap(),
        channel_names: None,
    })
}

pub fn load_series(path: &Path, format: SeriesFormat) -> Result<RawSeries> {
    match format {
        SeriesFormat::Csv => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_delimited(path, &text, true)
        }
        SeriesFormat::SpaceSeparated => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_delimited(path, &text, false)
        }
        SeriesFormat::BinaryF32 => parse_binary(path),
    }
}

/// One `{0,1}` label per line.
pub fn load_labels(path: &Path) -> Result<LabelSeries> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut labels = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        // tolerate float-formatted labels ("1.0") as some distributions use them
        let v: f64 = line.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            row: lineno + 1,
            col: 1,
            msg: format!("not a label: {line:?}"),
        })?;
        if v != 0.0 && v != 1.0 {
            return Err(Error::Validation(format!(
                "{}:{}: label must be 0 or 1, found {line}",
                path.display(),
                lineno + 1
            )));
        }
        labels.push(v as u8);
    }
    if labels.is_empty() {
        return Err(Error::Validation(format!(
            "{}: no labels",
            path.display()
        )));
    }
    Ok(LabelSeries { labels })
}

/// Write a series in delimited text form (comma-separated, full precision).
pub fn write_series(path: &Path, s: &RawSeries) -> Result<()> {
    let mut out = String::new();
    for row in s.values.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_labels(path: &Path, l: &LabelSeries) -> Result<()> {
    let mut out = String::new();
    for v in &l.labels {
        out.push_str(&format!("{v}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Per-channel min/max of the training split; constant channels get
/// `max := min + 1` so the scaling stays well defined.
pub fn fit_normalizer(train: &RawSeries) -> Normalizer {
    let d = train.channels();
    let mut min = vec![f64::INFINITY; d];
    let mut max = vec![f64::NEG_INFINITY; d];
    for row in train.values.rows() {
        for (c, &v) in row.iter().enumerate() {
            min[c] = min[c].min(v);
            max[c] = max[c].max(v);
        }
    }
    for c in 0..d {
        if max[c] == min[c] {
            max[c] = min[c] + 1.0;
        }
    }
    Normalizer { min, max }
}

/// Map every value to `(x − min) / (max − min)`, clamping to `[0, 1]` when
/// `clip` is set (test data may exceed the training range).
pub fn apply_normalizer(n: &Normalizer, s: &RawSeries, clip: bool) -> Result<RawSeries> {
    if n.min.len() != s.channels() {
        return Err(Error::Shape(format!(
            "normalizer fitted on {} channels, series has {}",
            n.min.len(),
            s.channels()
        )));
    }
    let mut values = s.values.clone();
    for mut row in values.rows_mut() {
        for (c, v) in row.iter_mut().enumerate() {
            let mut x = (*v - n.min[c]) / (n.max[c] - n.min[c]);
            if clip {
                x = x.clamp(0.0, 1.0);
            }
            *v = x;
        }
    }
    Ok(RawSeries {
        values,
        channel_names: s.channel_names.clone(),
    })
}

/// Contiguous sliding windows: window `i` covers `[i·stride, i·stride + w)`.
pub fn make_windows(s: &RawSeries, w: usize, stride: usize) -> Result<WindowBatch> {
    if w == 0 || stride == 0 {
        return Err(Error::Validation(
            "window length and stride must be positive".into(),
        ));
    }
    let t = s.len();
    if t < w {
        return Err(Error::Validation(format!(
            "series length {t} shorter than window {w}"
        )));
    }
    let count = (t - w) / stride + 1;
    let d = s.channels();
    let mut windows = Array3::zeros((count, w, d));
    let mut end_indices = Vec::with_capacity(count);
    for i in 0..count {
        let start = i * stride;
        windows
            .index_axis_mut(Axis(0), i)
            .assign(&s.values.slice(ndarray::s![start..start + w, ..]));
        end_indices.push(start + w - 1);
    }
    Ok(WindowBatch {
        windows,
        end_indices,
    })
}

/// Disjoint random partition by window; `val` gets `round(val_fraction · B)`
/// windows. Deterministic under a fixed seed; both splits stay sorted by end
/// index.
pub fn split_train_val(
    batch: &WindowBatch,
    val_fraction: f64,
    seed: u64,
) -> Result<(WindowBatch, WindowBatch)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Validation(format!(
            "val_fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    if batch.is_empty() {
        return Err(Error::Validation("cannot split an empty batch".into()));
    }
    let b = batch.len();
    let val_size = (val_fraction * b as f64).round() as usize;
    if val_size == 0 {
        eprintln!("warning: validation split is empty ({b} windows, fraction {val_fraction})");
    }
    let mut idx: Vec<usize> = (0..b).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut val_idx: Vec<usize> = idx[..val_size].to_vec();
    let mut train_idx: Vec<usize> = idx[val_size..].to_vec();
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok((batch.subset(&train_idx), batch.subset(&val_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use std::io::Write;

    fn series(values: Array2<f64>) -> RawSeries {
        RawSeries {
            values,
            channel_names: None,
        }
    }

    fn write_tmp(content: &str, ext: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(ext).tempfile().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_small_csv() {
        let f = write_tmp("1,2\n3,4\n5,6\n", ".csv");
        let s = load_series(f.path(), SeriesFormat::Csv).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.channels(), 2);
        assert_eq!(s.values[[2, 1]], 6.0);
    }

    #[test]
    fn column_count_mismatch_reports_row() {
        let f = write_tmp("1,2\n3\n", ".csv");
        let err = load_series(f.path(), SeriesFormat::Csv).unwrap_err();
        match err {
            Error::Parse { row, .. } => assert_eq!(row, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn non_finite_value_names_the_cell() {
        let f = write_tmp("1,2\n3,nan\n", ".csv");
        let err = load_series(f.path(), SeriesFormat::Csv).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("non-finite"), "{msg}");
        assert!(msg.contains(":2:2"), "{msg}");
    }

    #[test]
    fn header_row_becomes_channel_names() {
        let f = write_tmp("a,b\n1,2\n3,4\n", ".csv");
        let s = load_series(f.path(), SeriesFormat::Csv).unwrap();
        assert_eq!(s.channel_names.as_deref(), Some(&["a".to_string(), "b".to_string()][..]));
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn smd_style_machine_file_has_38_channels() {
        // fixture shaped like a public server-machine file: comma separated,
        // 38 columns
        let row: Vec<String> = (0..38).map(|c| format!("0.{c:02}")).collect();
        let content = format!("{}\n{}\n", row.join(","), row.join(","));
        let f = write_tmp(&content, ".txt");
        let s = load_series(f.path(), SeriesFormat::Csv).unwrap();
        assert_eq!(s.channels(), 38);
    }

    #[test]
    fn binary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        let vals: Vec<f32> = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let bytes: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(&p, bytes).unwrap();
        std::fs::write(format!("{}.shape", p.display()), "3 2").unwrap();
        let s = load_series(&p, SeriesFormat::BinaryF32).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.values[[1, 0]], 3.0);
    }

    #[test]
    fn normalizer_basics() {
        let s = series(arr2(&[[0.0, 7.0], [10.0, 7.0], [5.0, 7.0]]));
        let n = fit_normalizer(&s);
        assert_eq!(n.min, vec![0.0, 7.0]);
        assert_eq!(n.max, vec![10.0, 8.0]); // constant channel widened

        let x = series(arr2(&[[5.0, 7.0], [15.0, 7.0]]));
        let clipped = apply_normalizer(&n, &x, true).unwrap();
        assert_eq!(clipped.values[[0, 0]], 0.5);
        assert_eq!(clipped.values[[1, 0]], 1.0);
        let raw = apply_normalizer(&n, &x, false).unwrap();
        assert_eq!(raw.values[[1, 0]], 1.5);
    }

    #[test]
    fn normalizer_per_channel_matches_direct_column_stats() {
        let s = series(arr2(&[[1.0, -3.0], [4.0, 9.0], [2.0, 0.5]]));
        let n = fit_normalizer(&s);
        for c in 0..2 {
            let col = s.values.column(c);
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(n.min[c], lo);
            assert_eq!(n.max[c], hi);
        }
    }

    #[test]
    fn window_counts_and_end_indices() {
        let s = series(Array2::from_shape_fn((5, 1), |(i, _)| i as f64));
        let wb = make_windows(&s, 3, 1).unwrap();
        assert_eq!(wb.len(), 3);
        assert_eq!(wb.end_indices, vec![2, 3, 4]);

        let one = make_windows(&s, 5, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.end_indices, vec![4]);

        let s100 = series(Array2::from_shape_fn((100, 2), |(i, j)| (i + j) as f64));
        let w100 = make_windows(&s100, 100, 1).unwrap();
        assert_eq!(w100.len(), 1);
        assert_eq!(w100.end_indices, vec![99]);

        assert!(make_windows(&s, 6, 1).is_err());
    }

    #[test]
    fn windows_round_trip_last_rows() {
        let s = series(Array2::from_shape_fn((20, 3), |(i, j)| (i * 3 + j) as f64));
        let w = 4;
        let wb = make_windows(&s, w, 1).unwrap();
        for i in 0..wb.len() {
            let last_row = wb.windows.slice(ndarray::s![i, w - 1, ..]);
            let orig = s.values.row(wb.end_indices[i]);
            assert_eq!(last_row, orig);
            assert_eq!(wb.end_indices[i], w - 1 + i);
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let s = series(Array2::from_shape_fn((12, 1), |(i, _)| i as f64));
        let wb = make_windows(&s, 3, 1).unwrap();
        assert_eq!(wb.len(), 10);
        let (tr, va) = split_train_val(&wb, 0.3, 42).unwrap();
        assert_eq!(tr.len(), 7);
        assert_eq!(va.len(), 3);

        let (tr2, va2) = split_train_val(&wb, 0.3, 42).unwrap();
        assert_eq!(tr.end_indices, tr2.end_indices);
        assert_eq!(va.end_indices, va2.end_indices);

        // disjoint cover
        let mut all: Vec<usize> = tr.end_indices.iter().chain(&va.end_indices).copied().collect();
        all.sort_unstable();
        assert_eq!(all, wb.end_indices);

        // strictly increasing within each split
        assert!(tr.end_indices.windows(2).all(|p| p[0] < p[1]));
        assert!(va.end_indices.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn split_of_single_window_keeps_it_in_train() {
        let s = series(Array2::from_shape_fn((3, 1), |(i, _)| i as f64));
        let wb = make_windows(&s, 3, 1).unwrap();
        let (tr, va) = split_train_val(&wb, 0.3, 1).unwrap();
        assert_eq!(tr.len(), 1);
        assert_eq!(va.len(), 0);
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let s = series(Array2::from_shape_fn((4, 1), |(i, _)| i as f64));
        let wb = make_windows(&s, 2, 1).unwrap();
        assert!(split_train_val(&wb, 0.0, 1).is_err());
        assert!(split_train_val(&wb, 1.0, 1).is_err());
    }

    #[test]
    fn normalized_train_lies_in_unit_interval() {
        let s = series(Array2::from_shape_fn((30, 4), |(i, j)| {
            (i as f64 * 1.3 - j as f64 * 7.0).sin() * (j + 1) as f64
        }));
        let n = fit_normalizer(&s);
        let ns = apply_normalizer(&n, &s, true).unwrap();
        assert!(ns.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
