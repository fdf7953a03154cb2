//! Static SVG scatter plots of CSV columns: log-scaled x and y, points
//! colored by a third column. Reads nothing but the CSV text, and the same
//! text always gives the same bytes.

use std::fmt::Write;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlotError {
    #[error("csv: {0}")]
    Csv(String),
    #[error("no column named {0:?}")]
    MissingColumn(String),
    #[error("no row has positive {x} and {y}")]
    NoPoints { x: String, y: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlotSpec {
    pub x: String,
    pub y: String,
    pub color: String,
}

impl PlotSpec {
    /// First `*latency_cycles` column against the first `*energy_pJ` column,
    /// colored by `generation` when present, else by the first column.
    pub fn guess(header: &[String]) -> Option<Self> {
        let find = |suffix: &str| header.iter().find(|h| h.ends_with(suffix)).cloned();
        Some(PlotSpec {
            x: find("latency_cycles")?,
            y: find("energy_pJ")?,
            color: header
                .iter()
                .find(|h| *h == "generation")
                .or(header.first())
                .cloned()?,
        })
    }
}

pub fn csv_header(text: &str) -> Result<Vec<String>, PlotError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let h = r.headers().map_err(|e| PlotError::Csv(e.to_string()))?;
    Ok(h.iter().map(str::to_string).collect())
}

const W: f64 = 640.0;
const H: f64 = 480.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 110.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;

/// Viridis anchor colors, low to high.
const RAMP: [(u8, u8, u8); 5] = [
    (68, 1, 84),
    (59, 82, 139),
    (33, 145, 140),
    (94, 201, 98),
    (253, 231, 37),
];

fn ramp(t: f64) -> String {
    let t = if t.is_finite() {
        t.clamp(0.0, 1.0)
    } else {
        0.0
    };
    let s = t * (RAMP.len() - 1) as f64;
    let i = (s.floor() as usize).min(RAMP.len() - 2);
    let f = s - i as f64;
    let mix = |a: u8, b: u8| (a as f64 + (b as f64 - a as f64) * f).round() as u8;
    let (a, b) = (RAMP[i], RAMP[i + 1]);
    format!(
        "#{:02x}{:02x}{:02x}",
        mix(a.0, b.0),
        mix(a.1, b.1),
        mix(a.2, b.2)
    )
}

fn num(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

struct LogAxis {
    lo: f64,
    hi: f64,
}

impl LogAxis {
    fn new(vals: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in vals {
            lo = lo.min(v.log10());
            hi = hi.max(v.log10());
        }
        let pad = ((hi - lo) * 0.05).max(0.05);
        LogAxis {
            lo: lo - pad,
            hi: hi + pad,
        }
    }

    fn frac(&self, v: f64) -> f64 {
        (v.log10() - self.lo) / (self.hi - self.lo)
    }

    /// Powers of ten inside the range, or the two range ends when there
    /// are fewer than two.
    fn ticks(&self) -> Vec<f64> {
        let t: Vec<f64> = (self.lo.ceil() as i32..=self.hi.floor() as i32)
            .map(|e| 10f64.powi(e))
            .collect();
        if t.len() >= 2 {
            t
        } else {
            let span = self.hi - self.lo;
            vec![
                10f64.powf(self.lo + 0.1 * span),
                10f64.powf(self.hi - 0.1 * span),
            ]
        }
    }
}

/// Renders `spec.y` against `spec.x`. Rows whose x or y is missing or not
/// positive are left out; the count of plotted rows is printed in the
/// corner.
pub fn scatter_svg(csv_text: &str, spec: &PlotSpec) -> Result<String, PlotError> {
    let mut r = csv::Reader::from_reader(csv_text.as_bytes());
    let header: Vec<String> = r
        .headers()
        .map_err(|e| PlotError::Csv(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PlotError::MissingColumn(name.into()))
    };
    let (xi, yi, ci) = (col(&spec.x)?, col(&spec.y)?, col(&spec.color)?);
    let mut pts = vec![];
    for rec in r.records() {
        let rec = rec.map_err(|e| PlotError::Csv(e.to_string()))?;
        let get = |i: usize| rec.get(i).and_then(|s| s.trim().parse::<f64>().ok());
        if let (Some(x), Some(y)) = (get(xi), get(yi)) {
            if x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite() {
                pts.push((x, y, get(ci).filter(|c| c.is_finite())));
            }
        }
    }
    if pts.is_empty() {
        return Err(PlotError::NoPoints {
            x: spec.x.clone(),
            y: spec.y.clone(),
        });
    }
    let ax = LogAxis::new(pts.iter().map(|p| p.0));
    let ay = LogAxis::new(pts.iter().map(|p| p.1));
    let (cmin, cmax) = pts
        .iter()
        .filter_map(|p| p.2)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), c| {
            (a.min(c), b.max(c))
        });
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let px = |v: f64| LEFT + ax.frac(v) * pw;
    let py = |v: f64| TOP + (1.0 - ay.frac(v)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##
    );
    for t in ax.ticks() {
        let x = px(t);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#333"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
            TOP + ph,
            TOP + ph + 5.0,
            TOP + ph + 18.0,
            num(t)
        );
    }
    for t in ay.ticks() {
        let y = py(t);
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="#333"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            LEFT - 5.0,
            LEFT - 8.0,
            y + 4.0,
            num(t)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{} (log)</text>"#,
        LEFT + pw / 2.0,
        H - 15.0,
        escape(&spec.x)
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.2}" text-anchor="middle" transform="rotate(-90 15 {:.2})">{} (log)</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(&spec.y)
    );
    for (x, y, c) in &pts {
        let fill = match c {
            Some(c) if cmax > cmin => ramp((c - cmin) / (cmax - cmin)),
            Some(_) => ramp(0.5),
            None => "#999999".to_string(),
        };
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{fill}" fill-opacity="0.85"/>"#,
            px(*x),
            py(*y)
        );
    }
    let bx = W - RIGHT + 25.0;
    let steps = 20;
    let bh = ph / steps as f64;
    for k in 0..steps {
        let t = 1.0 - (k as f64 + 0.5) / steps as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{bx}" y="{:.2}" width="14" height="{:.2}" fill="{}"/>"#,
            TOP + k as f64 * bh,
            bh + 0.5,
            ramp(t)
        );
    }
    if cmin.is_finite() {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}">{}</text><text x="{:.2}" y="{:.2}">{}</text>"#,
            bx + 18.0,
            TOP + 10.0,
            num(cmax),
            bx + 18.0,
            TOP + ph,
            num(cmin)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{bx}" y="{:.2}">{}</text>"#,
        TOP - 10.0,
        escape(&spec.color)
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="end">n = {}</text>"#,
        LEFT + pw - 5.0,
        TOP + 14.0,
        pts.len()
    );
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "a,lat_latency_cycles,e_energy_pJ\n1,100,2000\n2,1000,300\n3,,5\n4,0,5\n";

    fn spec() -> PlotSpec {
        PlotSpec::guess(&csv_header(CSV).unwrap()).unwrap()
    }

    #[test]
    fn guess_picks_latency_energy_and_first_column() {
        assert_eq!(
            spec(),
            PlotSpec {
                x: "lat_latency_cycles".into(),
                y: "e_energy_pJ".into(),
                color: "a".into()
            }
        );
    }

    #[test]
    fn skips_rows_that_cannot_go_on_log_axes() {
        let svg = scatter_svg(CSV, &spec()).unwrap();
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(svg.contains("n = 2"));
    }

    #[test]
    fn same_csv_same_bytes() {
        assert_eq!(
            scatter_svg(CSV, &spec()).unwrap(),
            scatter_svg(CSV, &spec()).unwrap()
        );
    }

    #[test]
    fn larger_values_land_right_and_up() {
        let svg = scatter_svg(CSV, &spec()).unwrap();
        let cx: Vec<f64> = svg
            .lines()
            .filter(|l| l.starts_with("<circle"))
            .map(|l| l.split('"').nth(1).unwrap().parse().unwrap())
            .collect();
        assert!(cx[1] > cx[0]);
    }

    #[test]
    fn ramp_ends_are_the_anchor_colors() {
        assert_eq!(ramp(0.0), "#440154");
        assert_eq!(ramp(1.0), "#fde725");
        assert_eq!(ramp(f64::NAN), "#440154");
    }

    #[test]
    fn errors() {
        let bad = PlotSpec {
            x: "zzz".into(),
            ..spec()
        };
        assert_eq!(
            scatter_svg(CSV, &bad),
            Err(PlotError::MissingColumn("zzz".into()))
        );
        assert!(matches!(
            scatter_svg(
                "a,b_latency_cycles,c_energy_pJ\n1,0,0\n",
                &spec_for("b_latency_cycles", "c_energy_pJ")
            ),
            Err(PlotError::NoPoints { .. })
        ));
    }

    fn spec_for(x: &str, y: &str) -> PlotSpec {
        PlotSpec {
            x: x.into(),
            y: y.into(),
            color: "a".into(),
        }
    }
}
