//! Score-gap statistics over published result tables.
//!
//! For a (model, language) pair, `r1` is the fine-tuned model's gain from
//! beam 1 to beam 10 and `r2` at beam k is the improved model's gain over the
//! fine-tuned one at that beam. The report correlates the two across pairs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Stage;

/// Rows whose language is this name are averages of the others.
pub const OVERALL: &str = "Overall";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ScoreKey {
    pub model: String,
    pub language: String,
    pub beam: usize,
    pub stage: Stage,
}

impl std::fmt::Display for ScoreKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({}, {}, beam {}, {})",
            self.model, self.language, self.beam, self.stage
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    rows: BTreeMap<ScoreKey, f64>,
}

fn parse_stage(s: &str) -> Result<Stage> {
    match s {
        "fine_tuned" => Ok(Stage::FineTuned),
        "improved" => Ok(Stage::Improved),
        other => Err(Error::Data(format!("unknown stage {other:?}"))),
    }
}

impl ScoreTable {
    pub fn insert(&mut self, key: ScoreKey, score: f64) -> Result<()> {
        if ![1, 5, 10].contains(&key.beam) {
            return Err(Error::Data(format!("{key}: beam must be 1, 5 or 10")));
        }
        if key.stage == Stage::Pretrained {
            return Err(Error::Data(format!("{key}: stage must be fine_tuned or improved")));
        }
        if self.rows.contains_key(&key) {
            return Err(Error::Data(format!("duplicate row {key}")));
        }
        self.rows.insert(key, score);
        Ok(())
    }

    pub fn get(&self, model: &str, language: &str, beam: usize, stage: Stage) -> Result<f64> {
        let key = ScoreKey {
            model: model.into(),
            language: language.into(),
            beam,
            stage,
        };
        self.rows
            .get(&key)
            .copied()
            .ok_or_else(|| Error::Data(format!("missing score {key}")))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Distinct (model, language) pairs, sorted.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self
            .rows
            .keys()
            .map(|k| (k.model.clone(), k.language.clone()))
            .collect();
        out.dedup();
        out
    }

    /// Adds `delta` to every score of one stage.
    pub fn shifted(&self, stage: Stage, delta: f64) -> ScoreTable {
        let rows = self
            .rows
            .iter()
            .map(|(k, &v)| (k.clone(), if k.stage == stage { v + delta } else { v }))
            .collect();
        ScoreTable { rows }
    }

    /// CSV with header `model,language,beam,stage,bleu`; lines starting with
    /// `#` and blank lines are skipped.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut table = ScoreTable::default();
        let mut header_seen = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Data(format!("line {}: {msg}", lineno + 1));
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if !header_seen {
                if fields != ["model", "language", "beam", "stage", "bleu"] {
                    return Err(err(format!("unexpected header {line:?}")));
                }
                header_seen = true;
                continue;
            }
            if fields.len() != 5 {
                return Err(err(format!("expected 5 fields, found {}", fields.len())));
            }
            let beam = fields[2]
                .parse()
                .map_err(|_| err(format!("bad beam {:?}", fields[2])))?;
            let score: f64 = fields[4]
                .parse()
                .map_err(|_| err(format!("bad score {:?}", fields[4])))?;
            let key = ScoreKey {
                model: fields[0].into(),
                language: fields[1].into(),
                beam,
                stage: parse_stage(fields[3]).map_err(|e| err(e.to_string()))?,
            };
            table.insert(key, score).map_err(|e| err(e.to_string()))?;
        }
        if !header_seen {
            return Err(Error::Data("score table has no header".into()));
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ScoreTable::parse_csv(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapPoint {
    pub model: String,
    pub language: String,
    pub r1: f64,
    pub r2: f64,
}

/// One (r1, r2 at beam k) point per (model, language), ordered by model then
/// language.
pub fn compute_r1_r2(table: &ScoreTable, k: usize) -> Result<Vec<GapPoint>> {
    table
        .pairs()
        .into_iter()
        .map(|(model, language)| {
            let s = |beam, stage| table.get(&model, &language, beam, stage);
            let r1 = s(10, Stage::FineTuned)? - s(1, Stage::FineTuned)?;
            let r2 = s(k, Stage::Improved)? - s(k, Stage::FineTuned)?;
            Ok(GapPoint {
                model,
                language,
                r1,
                r2,
            })
        })
        .collect()
}

struct Moments {
    mean_x: f64,
    mean_y: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
}

fn moments(points: &[(f64, f64)]) -> Result<Moments> {
    if points.len() < 2 {
        return Err(Error::Contract(format!(
            "need at least 2 points, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (dx, dy) = (x - mean_x, y - mean_y);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 {
        return Err(Error::DegenerateAxis("x"));
    }
    if syy == 0.0 {
        return Err(Error::DegenerateAxis("y"));
    }
    Ok(Moments {
        mean_x,
        mean_y,
        sxx,
        syy,
        sxy,
    })
}

/// Sample Pearson correlation coefficient.
pub fn pearson(points: &[(f64, f64)]) -> Result<f64> {
    let m = moments(points)?;
    Ok((m.sxy / (m.sxx.sqrt() * m.syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares y = slope·x + intercept, with R² = 1 − SS_res/SS_tot.
pub fn fit_and_r2(points: &[(f64, f64)]) -> Result<LinearFit> {
    let m = moments(points)?;
    let slope = m.sxy / m.sxx;
    let intercept = m.mean_y - slope * m.mean_x;
    let ss_res: f64 = points
        .iter()
        .map(|&(x, y)| {
            let e = y - (slope * x + intercept);
            e * e
        })
        .sum();
    Ok(LinearFit {
        slope,
        intercept,
        r_squared: (1.0 - ss_res / m.syy).clamp(0.0, 1.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BeamAnalysis {
    pub beam: usize,
    pub points: Vec<GapPoint>,
    pub pearson_r: f64,
    pub r_squared: f64,
    pub fit: LinearFit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub beams: Vec<BeamAnalysis>,
}

impl AnalysisReport {
    pub fn beam(&self, k: usize) -> Option<&BeamAnalysis> {
        self.beams.iter().find(|b| b.beam == k)
    }
}

/// Correlation of r1 with r2 at each beam, leaving out the "Overall" rows.
pub fn analyze(table: &ScoreTable, beams: &[usize]) -> Result<AnalysisReport> {
    let beams = beams
        .iter()
        .map(|&k| {
            let points: Vec<GapPoint> = compute_r1_r2(table, k)?
                .into_iter()
                .filter(|p| p.language != OVERALL)
                .collect();
            let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.r1, p.r2)).collect();
            let fit = fit_and_r2(&xy)?;
            Ok(BeamAnalysis {
                beam: k,
                pearson_r: pearson(&xy)?,
                r_squared: fit.r_squared,
                fit,
                points,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AnalysisReport { beams })
}

pub fn points_csv(analysis: &BeamAnalysis) -> String {
    let mut out = String::from("model,language,r1,r2\n");
    for p in &analysis.points {
        let _ = writeln!(out, "{},{},{:.6},{:.6}", p.model, p.language, p.r1, p.r2);
    }
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

pub fn scatter_svg(analysis: &BeamAnalysis) -> Result<String> {
    if analysis.points.is_empty() {
        return Err(Error::Contract("nothing to plot".into()));
    }
    const W: f64 = 480.0;
    const H: f64 = 360.0;
    const PAD: f64 = 50.0;
    let xs = analysis.points.iter().map(|p| p.r1);
    let ys = analysis.points.iter().map(|p| p.r2);
    let span = |it: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let margin = ((hi - lo) * 0.1).max(1e-3);
        (lo - margin, hi + margin)
    };
    let (x0, x1) = span(&mut xs.into_iter());
    let (y0, y1) = span(&mut ys.into_iter());
    let px = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let py = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#,
        b = H - PAD
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">r1 (beam 10 - beam 1, fine_tuned)</text>"#,
        W / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">r2 at beam {} (improved - fine_tuned)</text>"#,
        H / 2.0,
        H / 2.0,
        analysis.beam
    );
    let (fx0, fx1) = (x0, x1);
    let line_y = |x: f64| analysis.fit.slope * x + analysis.fit.intercept;
    let _ = writeln!(
        s,
        r#"<line class="fit" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="steelblue"/>"#,
        px(fx0),
        py(line_y(fx0)),
        px(fx1),
        py(line_y(fx1))
    );
    for p in &analysis.points {
        let _ = writeln!(
            s,
            r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="4" fill="firebrick"><title>{} {}</title></circle>"#,
            px(p.r1),
            py(p.r2),
            xml_escape(&p.model),
            xml_escape(&p.language)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="24" text-anchor="middle">beam {}: r = {:.4}, R² = {:.4}</text>"#,
        W / 2.0,
        analysis.beam,
        analysis.pearson_r,
        analysis.r_squared
    );
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes the scatter plot to `svg_path` and its points next to it as CSV.
pub fn emit_scatter(analysis: &BeamAnalysis, svg_path: &Path) -> Result<()> {
    let svg = scatter_svg(analysis)?;
    fs::write(svg_path, svg).map_err(|e| Error::io(svg_path, e))?;
    let csv_path = svg_path.with_extension("csv");
    fs::write(&csv_path, points_csv(analysis)).map_err(|e| Error::io(&csv_path, e))
}
