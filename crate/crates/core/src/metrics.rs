//! Learning-curve aggregation: median with a [0.25, 0.75] quantile band
//! across seeds, CSV files and SVG plots.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Median and inter-quartile band at one evaluation point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

/// Quantile by linear interpolation between order statistics (type 7):
/// position `(n - 1) q` in the sorted sample.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile_band(values: &[f64]) -> Result<Band> {
    if values.is_empty() {
        return Err(Error::Metrics("quantile band of an empty sample".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Metrics("quantile band of a non-finite sample".into()));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(Band { median: quantile(&s, 0.5), q25: quantile(&s, 0.25), q75: quantile(&s, 0.75) })
}

/// One variant's curves for one metric, one row of `y` per seed.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSet {
    pub label: String,
    pub metric: String,
    pub x: Vec<u64>,
    pub seeds: Vec<u64>,
    pub y: Vec<Vec<f64>>,
}

impl CurveSet {
    pub fn validate(&self) -> Result<()> {
        if self.x.is_empty() {
            return Err(Error::Metrics(format!("{}: empty x grid", self.label)));
        }
        if self.y.is_empty() || self.y.len() != self.seeds.len() {
            return Err(Error::Metrics(format!("{}: need one curve per seed", self.label)));
        }
        if self.y.iter().any(|c| c.len() != self.x.len()) {
            return Err(Error::Metrics(format!("{}: seeds are not aligned on the x grid", self.label)));
        }
        if self.y.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Metrics(format!("{}: non-finite value", self.label)));
        }
        if self.metric == "win_rate" && self.y.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Metrics(format!("{}: win rate outside [0, 1]", self.label)));
        }
        if self.label.is_empty() || self.label.contains(['/', '\\', '.']) {
            return Err(Error::Metrics(format!("label `{}` is not usable as a file name", self.label)));
        }
        Ok(())
    }

    /// Band at every x.
    pub fn bands(&self) -> Result<Vec<Band>> {
        (0..self.x.len())
            .map(|i| quantile_band(&self.y.iter().map(|c| c[i]).collect::<Vec<_>>()))
            .collect()
    }

    pub fn csv_name(&self) -> String {
        format!("{}.{}.csv", self.label, self.metric)
    }

    /// Columns `env_steps, median, q25, q75, seed_<s>...`.
    pub fn to_csv(&self) -> Result<String> {
        self.validate()?;
        let mut out = String::from("env_steps,median,q25,q75");
        for s in &self.seeds {
            write!(out, ",seed_{s}").unwrap();
        }
        out.push('\n');
        for (i, b) in self.bands()?.iter().enumerate() {
            write!(out, "{},{},{},{}", self.x[i], b.median, b.q25, b.q75).unwrap();
            for c in &self.y {
                write!(out, ",{}", c[i]).unwrap();
            }
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses a file written by [`CurveSet::to_csv`]; the band columns are
    /// returned alongside.
    pub fn from_csv(label: &str, metric: &str, text: &str) -> Result<(Self, Vec<Band>)> {
        let bad = |m: &str| Error::Metrics(format!("{label}.{metric}.csv: {m}"));
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty file"))?.split(',').collect();
        if header.len() < 5 || header[..4] != ["env_steps", "median", "q25", "q75"] {
            return Err(bad("unexpected header"));
        }
        let seeds = header[4..]
            .iter()
            .map(|h| h.strip_prefix("seed_").and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad seed column")))
            .collect::<Result<Vec<u64>>>()?;
        let mut set = CurveSet {
            label: label.into(),
            metric: metric.into(),
            x: Vec::new(),
            seeds,
            y: vec![Vec::new(); header.len() - 4],
        };
        let mut bands = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != header.len() {
                return Err(bad("ragged row"));
            }
            set.x.push(cols[0].parse().map_err(|_| bad("bad env_steps"))?);
            let nums = cols[1..]
                .iter()
                .map(|c| c.parse::<f64>().map_err(|_| bad("bad number")))
                .collect::<Result<Vec<f64>>>()?;
            bands.push(Band { median: nums[0], q25: nums[1], q75: nums[2] });
            for (c, v) in set.y.iter_mut().zip(&nums[3..]) {
                c.push(*v);
            }
        }
        set.validate()?;
        Ok((set, bands))
    }
}

/// Writes one CSV per curve set and one SVG plot `<metric>.svg` into `dir`.
/// Every set is validated first, so nothing is written on bad input.
pub fn emit(curves: &[CurveSet], dir: &Path, title: &str) -> Result<Vec<PathBuf>> {
    if curves.is_empty() {
        return Err(Error::Metrics("no curves to emit".into()));
    }
    for c in curves {
        c.validate()?;
    }
    let metric = &curves[0].metric;
    if curves.iter().any(|c| &c.metric != metric) {
        return Err(Error::Metrics("one plot holds a single metric".into()));
    }
    let csvs = curves.iter().map(CurveSet::to_csv).collect::<Result<Vec<_>>>()?;
    let svg = render_svg(curves, title)?;
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (c, text) in curves.iter().zip(csvs) {
        let p = dir.join(c.csv_name());
        fs::write(&p, text)?;
        written.push(p);
    }
    let p = dir.join(format!("{metric}.svg"));
    fs::write(&p, svg)?;
    written.push(p);
    Ok(written)
}

/// Reads every `<label>.<metric>.csv` below `dir`, grouped by directory and
/// metric, sorted by path.
pub fn read_curves(dir: &Path) -> Result<Vec<(PathBuf, Vec<CurveSet>)>> {
    let mut files = Vec::new();
    collect_csv(dir, &mut files)?;
    files.sort();
    let mut groups: Vec<(PathBuf, String, Vec<CurveSet>)> = Vec::new();
    for f in files {
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let Some((label, metric)) = name.strip_suffix(".csv").and_then(|s| s.split_once('.')) else {
            continue;
        };
        let (set, _) = CurveSet::from_csv(label, metric, &fs::read_to_string(&f)?)?;
        let parent = f.parent().unwrap_or(dir).to_path_buf();
        match groups.iter_mut().find(|(p, m, _)| *p == parent && m == metric) {
            Some(g) => g.2.push(set),
            None => groups.push((parent, metric.to_string(), vec![set])),
        }
    }
    Ok(groups.into_iter().map(|(p, _, sets)| (p, sets)).collect())
}

fn collect_csv(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if !dir.is_dir() {
        return Ok(());
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_csv(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "csv") {
            out.push(path);
        }
    }
    Ok(())
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Median lines with shaded quantile bands, one colour per curve set.
pub fn render_svg(curves: &[CurveSet], title: &str) -> Result<String> {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 160.0, 30.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let bands: Vec<Vec<Band>> = curves.iter().map(CurveSet::bands).collect::<Result<_>>()?;
    let x_max = curves.iter().flat_map(|c| c.x.iter().copied()).max().unwrap_or(1).max(1) as f64;
    let (mut y_min, mut y_max) = if curves[0].metric == "win_rate" { (0.0, 1.0) } else { (f64::MAX, f64::MIN) };
    for b in bands.iter().flatten() {
        y_min = y_min.min(b.q25);
        y_max = y_max.max(b.q75);
    }
    if y_max - y_min < 1e-9 {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let sx = |x: f64| left + pw * x / x_max;
    let sy = |y: f64| top + ph * (1.0 - (y - y_min) / (y_max - y_min));

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="18" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#, left + pw / 2.0, escape(title)).unwrap();
    writeln!(s, r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#).unwrap();
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x_max * f, y_min + (y_max - y_min) * f);
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"#, sx(xv), top + ph + 14.0, xv.round()).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="end">{:.2}</text>"#, left - 4.0, sy(yv) + 3.0, yv).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">environment steps</text>"#, left + pw / 2.0, h - 12.0).unwrap();
    writeln!(s, r#"<text x="14" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#, top + ph / 2.0, top + ph / 2.0, escape(&curves[0].metric)).unwrap();
    for (k, (c, b)) in curves.iter().zip(&bands).enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut poly = String::new();
        for (x, band) in c.x.iter().zip(b) {
            write!(poly, "{:.2},{:.2} ", sx(*x as f64), sy(band.q75)).unwrap();
        }
        for (x, band) in c.x.iter().zip(b).rev() {
            write!(poly, "{:.2},{:.2} ", sx(*x as f64), sy(band.q25)).unwrap();
        }
        writeln!(s, r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, poly.trim_end()).unwrap();
        let line: Vec<String> =
            c.x.iter().zip(b).map(|(x, band)| format!("{:.2},{:.2}", sx(*x as f64), sy(band.median))).collect();
        writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, line.join(" ")).unwrap();
        let ly = top + 14.0 + 18.0 * k as f64;
        writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, left + pw + 10.0, left + pw + 30.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#, left + pw + 35.0, ly + 4.0, escape(&c.label)).unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}
