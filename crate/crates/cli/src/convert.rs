//! Converters from the public benchmark distributions into the plain
//! delimited text layout: one directory per entity holding `train.txt`,
//! `test.txt` and `labels.txt`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hifi_core::dataio::{
    load_labels, load_series, write_labels, write_series, LabelSeries, RawSeries, SeriesFormat,
};
use ndarray::Array2;

/// Minimal NPY (v1.x/v2.x) reader for C-order f4/f8 matrices.
fn read_npy(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
        bail!("{}: not an NPY file", path.display());
    }
    let major = bytes[6];
    let (header_len, header_start) = if major >= 2 {
        if bytes.len() < 12 {
            bail!("{}: truncated NPY header", path.display());
        }
        (
            u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize,
            12,
        )
    } else {
        (
            u16::from_le_bytes(bytes[8..10].try_into().unwrap()) as usize,
            10,
        )
    };
    let header_end = header_start + header_len;
    if bytes.len() < header_end {
        bail!("{}: truncated NPY header", path.display());
    }
    let header = std::str::from_utf8(&bytes[header_start..header_end])
        .context("NPY header is not UTF-8")?;

    let grab = |key: &str| -> Result<String> {
        let at = header
            .find(key)
            .with_context(|| format!("{}: NPY header missing {key}", path.display()))?;
        Ok(header[at + key.len()..].to_string())
    };
    let descr_tail = grab("'descr':")?;
    let descr: String = descr_tail
        .trim_start()
        .trim_start_matches('\'')
        .chars()
        .take(3)
        .collect();
    let elem = match descr.as_str() {
        "<f4" => 4,
        "<f8" => 8,
        other => bail!("{}: unsupported NPY dtype {other:?}", path.display()),
    };
    if grab("'fortran_order':")?.trim_start().starts_with("True") {
        bail!("{}: fortran-order NPY not supported", path.display());
    }
    let shape_tail = grab("'shape':")?;
    let open = shape_tail.find('(').context("NPY shape missing parens")?;
    let close = shape_tail.find(')').context("NPY shape missing parens")?;
    let dims: Vec<usize> = shape_tail[open + 1..close]
        .split(',')
        .filter_map(|t| t.trim().parse().ok())
        .collect();
    let (rows, cols) = match dims[..] {
        [r] => (r, 1),
        [r, c] => (r, c),
        _ => bail!("{}: expected a 1-d or 2-d NPY array", path.display()),
    };

    let data = &bytes[header_end..];
    if data.len() < rows * cols * elem {
        bail!("{}: NPY data shorter than its shape", path.display());
    }
    let mut flat = Vec::with_capacity(rows * cols);
    for i in 0..rows * cols {
        let off = i * elem;
        let v = if elem == 4 {
            f32::from_le_bytes(data[off..off + 4].try_into().unwrap()) as f64
        } else {
            f64::from_le_bytes(data[off..off + 8].try_into().unwrap())
        };
        flat.push(v);
    }
    Ok(Array2::from_shape_vec((rows, cols), flat)?)
}

fn write_entity(
    out_dir: &Path,
    entity: &str,
    train: &RawSeries,
    test: &RawSeries,
    labels: &LabelSeries,
) -> Result<PathBuf> {
    let dir = out_dir.join(entity);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_series(&dir.join("train.txt"), train)?;
    write_series(&dir.join("test.txt"), test)?;
    write_labels(&dir.join("labels.txt"), labels)?;
    Ok(dir)
}

fn stem(path: &Path) -> String {
    path.file_stem().unwrap_or_default().to_string_lossy().to_string()
}

/// Server-machine layout: `train/`, `test/`, `test_label/` directories of
/// per-machine delimited text files.
pub fn convert_smd(input: &Path, out_dir: &Path) -> Result<Vec<String>> {
    let train_dir = input.join("train");
    let test_dir = input.join("test");
    let label_dir = input.join("test_label");
    for (d, what) in [
        (&train_dir, "train/"),
        (&test_dir, "test/"),
        (&label_dir, "test_label/"),
    ] {
        if !d.is_dir() {
            bail!(
                "unrecognized server-machine layout: expected {} under {}",
                what,
                input.display()
            );
        }
    }
    let mut entities = Vec::new();
    let mut files: Vec<PathBuf> = fs::read_dir(&train_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no machine files found under {}", train_dir.display());
    }
    for train_path in files {
        let name = stem(&train_path);
        let test_path = test_dir.join(train_path.file_name().unwrap());
        let label_path = label_dir.join(train_path.file_name().unwrap());
        if !test_path.exists() {
            bail!("missing test file {}", test_path.display());
        }
        if !label_path.exists() {
            bail!("missing label file {}", label_path.display());
        }
        let train = load_series(&train_path, SeriesFormat::Csv)?;
        let test = load_series(&test_path, SeriesFormat::Csv)?;
        let labels = load_labels(&label_path)?;
        if labels.labels.len() != test.len() {
            bail!(
                "{}: {} labels for {} test rows",
                name,
                labels.labels.len(),
                test.len()
            );
        }
        write_entity(out_dir, &name, &train, &test, &labels)?;
        entities.push(name);
    }
    Ok(entities)
}

/// Telemetry layout: `train/<chan>.npy`, `test/<chan>.npy`, and a
/// `labeled_anomalies.csv` with inclusive anomaly ranges per channel.
/// `spacecraft` filters the entities ("SMAP" or "MSL").
pub fn convert_telemetry(input: &Path, out_dir: &Path, spacecraft: &str) -> Result<Vec<String>> {
    let csv_path = input.join("labeled_anomalies.csv");
    let train_dir = input.join("train");
    let test_dir = input.join("test");
    if !csv_path.exists() || !train_dir.is_dir() || !test_dir.is_dir() {
        bail!(
            "unrecognized telemetry layout: expected train/, test/ and labeled_anomalies.csv under {}",
            input.display()
        );
    }
    let csv = fs::read_to_string(&csv_path)?;
    let mut entities = Vec::new();
    for (lineno, line) in csv.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let chan = line.split(',').next().unwrap_or("").trim().to_string();
        if chan.is_empty() {
            continue;
        }
        let craft = line.split(',').nth(1).unwrap_or("").trim().to_uppercase();
        if craft != spacecraft.to_uppercase() {
            continue;
        }
        let open = line.find('[');
        let close = line.rfind(']');
        let (Some(open), Some(close)) = (open, close) else {
            bail!("{}:{}: missing anomaly ranges", csv_path.display(), lineno + 1);
        };
        let ranges = parse_ranges(&line[open..=close])
            .with_context(|| format!("{}:{}", csv_path.display(), lineno + 1))?;

        let train_npy = train_dir.join(format!("{chan}.npy"));
        let test_npy = test_dir.join(format!("{chan}.npy"));
        if !train_npy.exists() || !test_npy.exists() {
            bail!(
                "missing channel files for {chan}: expected {} and {}",
                train_npy.display(),
                test_npy.display()
            );
        }
        let train = RawSeries {
            values: read_npy(&train_npy)?,
            channel_names: None,
        };
        let test = RawSeries {
            values: read_npy(&test_npy)?,
            channel_names: None,
        };
        let mut labels = vec![0u8; test.len()];
        for (a, b) in ranges {
            if a >= labels.len() {
                continue;
            }
            let end = b.min(labels.len() - 1);
            for l in labels.iter_mut().take(end + 1).skip(a) {
                *l = 1;
            }
        }
        write_entity(out_dir, &chan, &train, &test, &LabelSeries { labels })?;
        entities.push(chan);
    }
    if entities.is_empty() {
        bail!("no {spacecraft} entities found in {}", csv_path.display());
    }
    Ok(entities)
}

/// `[[a, b], [c, d]]` → inclusive index pairs.
fn parse_ranges(text: &str) -> Result<Vec<(usize, usize)>> {
    let inner = text.trim().trim_start_matches('[').trim_end_matches(']');
    let mut out = Vec::new();
    for pair in inner.split("],") {
        let nums: Vec<usize> = pair
            .chars()
            .map(|c| if c.is_ascii_digit() { c } else { ' ' })
            .collect::<String>()
            .split_whitespace()
            .filter_map(|t| t.parse().ok())
            .collect();
        match nums[..] {
            [a, b] => out.push((a, b)),
            [] => continue,
            _ => bail!("malformed anomaly range {pair:?}"),
        }
    }
    Ok(out)
}

/// Validating passthrough of an already-plain directory.
pub fn convert_generic(input: &Path, out_dir: &Path) -> Result<Vec<String>> {
    let find = |names: &[&str]| -> Option<PathBuf> {
        names
            .iter()
            .map(|n| input.join(n))
            .find(|p| p.exists())
    };
    let train_path = find(&["train.csv", "train.txt"]).with_context(|| {
        format!(
            "unrecognized layout: expected train.csv or train.txt under {}",
            input.display()
        )
    })?;
    let test_path = find(&["test.csv", "test.txt"]).with_context(|| {
        format!(
            "unrecognized layout: expected test.csv or test.txt under {}",
            input.display()
        )
    })?;
    let label_path = find(&["labels.txt", "test_label.txt"]).with_context(|| {
        format!(
            "missing label file: expected labels.txt under {}",
            input.display()
        )
    })?;
    let train = load_series(&train_path, SeriesFormat::detect(&train_path))?;
    let test = load_series(&test_path, SeriesFormat::detect(&test_path))?;
    let labels = load_labels(&label_path)?;
    if train.channels() != test.channels() {
        bail!(
            "train has {} channels but test has {}",
            train.channels(),
            test.channels()
        );
    }
    if labels.labels.len() != test.len() {
        bail!(
            "{} labels for {} test rows",
            labels.labels.len(),
            test.len()
        );
    }
    write_entity(out_dir, "data", &train, &test, &labels)?;
    Ok(vec!["data".to_string()])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn npy_bytes(shape: &[usize], values: &[f32]) -> Vec<u8> {
        let shape_str = match shape {
            [r] => format!("({r},)"),
            [r, c] => format!("({r}, {c})"),
            _ => panic!(),
        };
        let header = format!(
            "{{'descr': '<f4', 'fortran_order': False, 'shape': {shape_str}, }}"
        );
        let mut padded = header.into_bytes();
        while (10 + padded.len() + 1) % 64 != 0 {
            padded.push(b' ');
        }
        padded.push(b'\n');
        let mut out = Vec::new();
        out.extend_from_slice(b"\x93NUMPY");
        out.push(1);
        out.push(0);
        out.extend_from_slice(&(padded.len() as u16).to_le_bytes());
        out.extend_from_slice(&padded);
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    #[test]
    fn npy_reader_handles_1d_and_2d() {
        let dir = tempfile::tempdir().unwrap();
        let p2 = dir.path().join("m.npy");
        fs::write(&p2, npy_bytes(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let m = read_npy(&p2).unwrap();
        assert_eq!(m.shape(), &[2, 3]);
        assert_eq!(m[[1, 2]], 6.0);

        let p1 = dir.path().join("v.npy");
        fs::write(&p1, npy_bytes(&[4], &[9.0, 8.0, 7.0, 6.0])).unwrap();
        let v = read_npy(&p1).unwrap();
        assert_eq!(v.shape(), &[4, 1]);
    }

    #[test]
    fn range_parser_reads_nested_pairs() {
        assert_eq!(
            parse_ranges("[[1, 5], [100, 200]]").unwrap(),
            vec![(1, 5), (100, 200)]
        );
        assert_eq!(parse_ranges("[]").unwrap(), vec![]);
    }

    #[test]
    fn smd_layout_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("smd");
        for sub in ["train", "test", "test_label"] {
            fs::create_dir_all(input.join(sub)).unwrap();
        }
        // d = 38 columns, as in the public distribution
        let row: Vec<String> = (0..38).map(|c| format!("0.{c:02}")).collect();
        let line = row.join(",");
        fs::write(
            input.join("train/machine-1-1.txt"),
            format!("{line}\n{line}\n{line}\n"),
        )
        .unwrap();
        fs::write(
            input.join("test/machine-1-1.txt"),
            format!("{line}\n{line}\n"),
        )
        .unwrap();
        fs::write(input.join("test_label/machine-1-1.txt"), "0\n1\n").unwrap();

        let out = dir.path().join("out");
        let entities = convert_smd(&input, &out).unwrap();
        assert_eq!(entities, vec!["machine-1-1".to_string()]);
        let train = load_series(
            &out.join("machine-1-1/train.txt"),
            SeriesFormat::Csv,
        )
        .unwrap();
        assert_eq!(train.channels(), 38);
        assert_eq!(train.len(), 3);
        let labels = load_labels(&out.join("machine-1-1/labels.txt")).unwrap();
        assert_eq!(labels.labels, vec![0, 1]);
    }

    #[test]
    fn smd_missing_label_file_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("smd");
        for sub in ["train", "test", "test_label"] {
            fs::create_dir_all(input.join(sub)).unwrap();
        }
        fs::write(input.join("train/machine-1-1.txt"), "1,2\n").unwrap();
        fs::write(input.join("test/machine-1-1.txt"), "1,2\n").unwrap();
        let err = convert_smd(&input, &dir.path().join("out")).unwrap_err();
        assert!(err.to_string().contains("label"), "{err}");
    }

    #[test]
    fn telemetry_layout_expands_ranges() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("tele");
        fs::create_dir_all(input.join("train")).unwrap();
        fs::create_dir_all(input.join("test")).unwrap();
        fs::write(
            input.join("labeled_anomalies.csv"),
            "chan_id,spacecraft,anomaly_sequences,class,num_values\n\
             A-1,SMAP,\"[[2, 4]]\",point,8\n\
             B-1,MSL,\"[[0, 1]]\",point,8\n",
        )
        .unwrap();
        let train_vals: Vec<f32> = (0..10).map(|i| i as f32).collect();
        let test_vals: Vec<f32> = (0..8).map(|i| i as f32 * 0.5).collect();
        fs::write(input.join("train/A-1.npy"), npy_bytes(&[10], &train_vals)).unwrap();
        fs::write(input.join("test/A-1.npy"), npy_bytes(&[8], &test_vals)).unwrap();

        let out = dir.path().join("out");
        let entities = convert_telemetry(&input, &out, "SMAP").unwrap();
        assert_eq!(entities, vec!["A-1".to_string()]);
        let labels = load_labels(&out.join("A-1/labels.txt")).unwrap();
        assert_eq!(labels.labels, vec![0, 0, 1, 1, 1, 0, 0, 0]);
    }

    #[test]
    fn generic_passthrough_validates() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("g");
        fs::create_dir_all(&input).unwrap();
        fs::write(input.join("train.csv"), "1,2\n3,4\n").unwrap();
        fs::write(input.join("test.csv"), "5,6\n7,8\n").unwrap();
        fs::write(input.join("labels.txt"), "0\n1\n").unwrap();
        let out = dir.path().join("out");
        convert_generic(&input, &out).unwrap();
        assert!(out.join("data/train.txt").exists());

        fs::remove_file(input.join("labels.txt")).unwrap();
        let err = convert_generic(&input, &dir.path().join("out2")).unwrap_err();
        assert!(err.to_string().contains("labels.txt"), "{err}");
    }
}
