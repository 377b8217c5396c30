//! Self-contained SVG figures from the CSV files the other commands write.

use std::fmt::Write as _;
use vist_core::train::METRICS_HEADER;
use vist_core::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

#[derive(Clone, Debug, PartialEq)]
pub struct Figure {
    /// File name, without directory.
    pub name: String,
    pub svg: String,
}

struct Table<'a> {
    header: Vec<&'a str>,
    rows: Vec<Vec<&'a str>>,
}

impl<'a> Table<'a> {
    fn parse(text: &'a str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::Usage("CSV is empty".into()))?
            .split(',')
            .map(str::trim)
            .collect();
        let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').map(str::trim).collect()).collect();
        if rows.is_empty() {
            return Err(Error::Usage("CSV has a header but no rows".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != header.len() {
                return Err(Error::Format {
                    field: format!("csv line {}", i + 2),
                    detail: format!("{} fields, header has {}", r.len(), header.len()),
                });
            }
        }
        Ok(Table { header, rows })
    }

    fn col(&self, name: &str) -> usize {
        self.header.iter().position(|h| *h == name).expect("column checked by header match")
    }

    fn num(&self, row: usize, col: &str) -> Result<f64> {
        let v = self.rows[row][self.col(col)];
        v.parse().map_err(|_| Error::Format {
            field: format!("csv line {} column {col}", row + 2),
            detail: format!("not a number: `{v}`"),
        })
    }

    fn is(&self, header: &str) -> bool {
        self.header.join(",") == header
    }
}

/// Figures for a traces, sweep, ablation, per-neuron or metrics CSV.
/// `neurons` restricts trace plots to the listed ids.
pub fn figures(csv: &str, neurons: Option<&[usize]>) -> Result<Vec<Figure>> {
    let t = Table::parse(csv)?;
    if t.is("t,neuron,target,predicted") {
        traces(&t, neurons)
    } else if t.header.first() == Some(&"size") && t.header.contains(&"mean_cc_tracked") {
        let labels = t.rows.iter().map(|r| r[0].to_string()).collect();
        let v = (0..t.rows.len()).map(|i| t.num(i, "mean_cc_tracked")).collect::<Result<_>>()?;
        Ok(vec![Figure {
            name: "sweep.svg".into(),
            svg: bar_chart("Tracked neurons, cross-movie CC by output-set size", &labels, &v),
        }])
    } else if t.header.first() == Some(&"variant") && t.header.contains(&"cross_cc") {
        let labels = t.rows.iter().map(|r| r[0].to_string()).collect();
        let v = (0..t.rows.len()).map(|i| t.num(i, "cross_cc")).collect::<Result<_>>()?;
        Ok(vec![Figure {
            name: "ablation.svg".into(),
            svg: bar_chart("Cross-movie CC by variant", &labels, &v),
        }])
    } else if t.is("neuron,cc,sdkl") {
        let labels = t.rows.iter().map(|r| r[0].to_string()).collect();
        let v = (0..t.rows.len()).map(|i| t.num(i, "cc")).collect::<Result<_>>()?;
        Ok(vec![Figure {
            name: "per_neuron_cc.svg".into(),
            svg: bar_chart("CC per neuron", &labels, &v),
        }])
    } else if t.is(METRICS_HEADER) {
        metrics(&t)
    } else {
        Err(Error::Usage(format!("unrecognised CSV header `{}`", t.header.join(","))))
    }
}

fn traces(t: &Table, neurons: Option<&[usize]>) -> Result<Vec<Figure>> {
    let mut order: Vec<usize> = Vec::new();
    let mut series: Vec<(Vec<(f64, f64)>, Vec<(f64, f64)>)> = Vec::new();
    for i in 0..t.rows.len() {
        let id = t.num(i, "neuron")? as usize;
        if neurons.is_some_and(|n| !n.contains(&id)) {
            continue;
        }
        let k = match order.iter().position(|&o| o == id) {
            Some(k) => k,
            None => {
                order.push(id);
                series.push((Vec::new(), Vec::new()));
                order.len() - 1
            }
        };
        let x = t.num(i, "t")?;
        series[k].0.push((x, t.num(i, "target")?));
        series[k].1.push((x, t.num(i, "predicted")?));
    }
    if order.is_empty() {
        return Err(Error::Usage("no rows for the selected neurons".into()));
    }
    Ok(order
        .iter()
        .zip(series)
        .map(|(id, (target, pred))| Figure {
            name: format!("trace_neuron{id}.svg"),
            svg: line_chart(
                &format!("Neuron {id}: target and predicted rate"),
                "frame",
                &[("target", &target), ("predicted", &pred)],
            ),
        })
        .collect())
}

fn metrics(t: &Table) -> Result<Vec<Figure>> {
    let mut loss = Vec::new();
    let (mut within, mut cross) = (Vec::new(), Vec::new());
    for (i, r) in t.rows.iter().enumerate() {
        // the averaged model's rows carry no epoch number
        let Ok(epoch) = r[0].parse::<f64>() else { continue };
        match r[1] {
            "train" => loss.push((epoch, t.num(i, "loss_total")?)),
            "within" => within.push((epoch, t.num(i, "mean_cc")?)),
            "cross" => cross.push((epoch, t.num(i, "mean_cc")?)),
            _ => {}
        }
    }
    if loss.is_empty() {
        return Err(Error::Usage("metrics CSV has no training rows".into()));
    }
    let mut out = vec![Figure {
        name: "metrics_loss.svg".into(),
        svg: line_chart("Training loss", "epoch", &[("train", &loss)]),
    }];
    if !cross.is_empty() {
        out.push(Figure {
            name: "metrics_cc.svg".into(),
            svg: line_chart("Mean CC", "epoch", &[("within", &within), ("cross", &cross)]),
        });
    }
    Ok(out)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Padded `[lo, hi]` covering the finite values.
fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn open(title: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">\n"
    );
    writeln!(s, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>").unwrap();
    writeln!(
        s,
        "<text x=\"{}\" y=\"24\" font-size=\"15\" text-anchor=\"middle\">{}</text>",
        WIDTH / 2.0,
        escape(title)
    )
    .unwrap();
    s
}

fn axes(s: &mut String, ylo: f64, yhi: f64) {
    let (x0, y0, y1) = (MARGIN, HEIGHT - MARGIN, MARGIN);
    writeln!(
        s,
        "<path d=\"M{x0},{y1} L{x0},{y0} L{},{y0}\" stroke=\"black\" fill=\"none\"/>",
        WIDTH - MARGIN
    )
    .unwrap();
    for (v, y) in [(ylo, y0), (yhi, y1)] {
        writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\">{v:.3}</text>",
            x0 - 4.0,
            y + 4.0
        )
        .unwrap();
    }
}

pub fn line_chart(title: &str, xlabel: &str, series: &[(&str, &Vec<(f64, f64)>)]) -> String {
    let (xlo, xhi) = range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let (ylo, yhi) = range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let sx = |x: f64| MARGIN + (x - xlo) / (xhi - xlo) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - ylo) / (yhi - ylo) * (HEIGHT - 2.0 * MARGIN);
    let mut s = open(title);
    axes(&mut s, ylo, yhi);
    writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{}</text>",
        WIDTH / 2.0,
        HEIGHT - 16.0,
        escape(xlabel)
    )
    .unwrap();
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        writeln!(
            s,
            "<polyline class=\"series\" points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
            path.join(" ")
        )
        .unwrap();
        let ly = MARGIN + 14.0 * k as f64;
        writeln!(
            s,
            "<text x=\"{}\" y=\"{ly}\" font-size=\"12\" fill=\"{color}\" text-anchor=\"end\">{}</text>",
            WIDTH - MARGIN,
            escape(name)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

pub fn bar_chart(title: &str, labels: &Vec<String>, values: &Vec<f64>) -> String {
    let (ylo, yhi) = range(values.iter().copied().chain([0.0]));
    let sy = |y: f64| HEIGHT - MARGIN - (y - ylo) / (yhi - ylo) * (HEIGHT - 2.0 * MARGIN);
    let slot = (WIDTH - 2.0 * MARGIN) / values.len() as f64;
    let mut s = open(title);
    axes(&mut s, ylo, yhi);
    let base = sy(0.0);
    for (i, (label, &v)) in labels.iter().zip(values).enumerate() {
        let x = MARGIN + slot * (i as f64 + 0.15);
        let top = if v.is_finite() { sy(v) } else { base };
        writeln!(
            s,
            "<rect class=\"bar\" x=\"{x:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"><title>{} = {v}</title></rect>",
            top.min(base),
            slot * 0.7,
            (top - base).abs(),
            COLORS[0],
            escape(label)
        )
        .unwrap();
        writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
            x + slot * 0.35,
            HEIGHT - MARGIN + 16.0,
            escape(label)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}
