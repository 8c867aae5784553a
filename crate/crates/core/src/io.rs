//! CSV exchange formats for panels and spatial weights.
//!
//! Panels are long format with a header `unit,period,y,x_1..,z_1..`; one row
//! per unit and period, balanced. Weights are coordinate triplets with header
//! `kind,p,t,i,j,value` where `kind` is `lag` or `error`, `p` the 1-based
//! matrix index within its family, `t` a period label (empty for all periods)
//! and `i, j` unit labels. The `kind`, `p` and `t` columns are optional.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{PanelData, SpatialWeightMatrix};
use crate::sparse::CsrMatrix;

/// Panel columns read from CSV, before weights are attached.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelTable {
    /// Unit labels in order of first appearance.
    pub units: Vec<String>,
    /// Period labels in ascending order.
    pub periods: Vec<i64>,
    /// `n x T`.
    pub y: DMatrix<f64>,
    pub x: Vec<DMatrix<f64>>,
    pub z: Vec<DMatrix<f64>>,
}

impl PanelTable {
    pub fn n(&self) -> usize {
        self.units.len()
    }

    pub fn into_panel(
        self,
        lag_weights: Vec<Vec<Arc<SpatialWeightMatrix>>>,
        error_weights: Vec<Vec<Arc<SpatialWeightMatrix>>>,
    ) -> Result<PanelData> {
        PanelData::new(self.y, self.x, self.z, lag_weights, error_weights)
    }
}

fn parse_err(line: Option<u64>, msg: impl std::fmt::Display) -> Error {
    match line {
        Some(l) => Error::Parse(format!("line {l}: {msg}")),
        None => Error::Parse(msg.to_string()),
    }
}

fn covariate_columns(headers: &csv::StringRecord, prefix: &str) -> Result<Vec<usize>> {
    let mut found: Vec<(usize, usize)> = Vec::new();
    for (pos, h) in headers.iter().enumerate() {
        if let Some(rest) = h.strip_prefix(prefix) {
            let k: usize = rest
                .parse()
                .map_err(|_| parse_err(None, format!("column `{h}` is not of the form {prefix}<k>")))?;
            found.push((k, pos));
        }
    }
    found.sort();
    for (expect, &(k, _)) in found.iter().enumerate() {
        if k != expect + 1 {
            return Err(parse_err(None, format!("{prefix} columns must be numbered 1..k without gaps")));
        }
    }
    Ok(found.into_iter().map(|(_, pos)| pos).collect())
}

fn required(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| parse_err(None, format!("missing column `{name}`")))
}

fn float(record: &csv::StringRecord, pos: usize, name: &str) -> Result<f64> {
    let line = record.position().map(|p| p.line());
    let v: f64 = record[pos]
        .trim()
        .parse()
        .map_err(|_| parse_err(line, format!("`{name}` is not a number: `{}`", &record[pos])))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("`{name}` is not finite")));
    }
    Ok(v)
}

/// Reads a balanced long-format panel.
pub fn read_panel<R: Read>(reader: R) -> Result<PanelTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let (c_unit, c_period, c_y) = (required(&headers, "unit")?, required(&headers, "period")?, required(&headers, "y")?);
    let cx = covariate_columns(&headers, "x_")?;
    let cz = covariate_columns(&headers, "z_")?;

    let mut unit_index: HashMap<String, usize> = HashMap::new();
    let mut units = Vec::new();
    let mut rows: BTreeMap<i64, HashMap<usize, (f64, Vec<f64>, Vec<f64>)>> = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line());
        let unit = record[c_unit].to_string();
        let period: i64 = record[c_period]
            .parse()
            .map_err(|_| parse_err(line, format!("period `{}` is not an integer", &record[c_period])))?;
        let next = units.len();
        let u = *unit_index.entry(unit.clone()).or_insert_with(|| {
            units.push(unit.clone());
            next
        });
        let y = float(&record, c_y, "y")?;
        let x = cx.iter().map(|&c| float(&record, c, &headers[c])).collect::<Result<Vec<_>>>()?;
        let z = cz.iter().map(|&c| float(&record, c, &headers[c])).collect::<Result<Vec<_>>>()?;
        if rows.entry(period).or_default().insert(u, (y, x, z)).is_some() {
            return Err(parse_err(line, format!("duplicate row for unit `{unit}`, period {period}")));
        }
    }
    let n = units.len();
    let periods: Vec<i64> = rows.keys().copied().collect();
    let t_len = periods.len();
    if n == 0 {
        return Err(parse_err(None, "panel has no rows"));
    }
    let mut y = DMatrix::zeros(n, t_len);
    let mut x = vec![DMatrix::zeros(n, cx.len()); t_len];
    let mut z = vec![DMatrix::zeros(n, cz.len()); t_len];
    for (t, (period, by_unit)) in rows.into_iter().enumerate() {
        if by_unit.len() != n {
            let missing = (0..n).find(|u| !by_unit.contains_key(u)).expect("some unit is missing");
            return Err(parse_err(
                None,
                format!("unbalanced panel: unit `{}` has no row for period {period}", units[missing]),
            ));
        }
        for (u, (yv, xv, zv)) in by_unit {
            y[(u, t)] = yv;
            for (c, v) in xv.into_iter().enumerate() {
                x[t][(u, c)] = v;
            }
            for (c, v) in zv.into_iter().enumerate() {
                z[t][(u, c)] = v;
            }
        }
    }
    Ok(PanelTable { units, periods, y, x, z })
}

/// Writes `panel` in long format, unit-major. Units are labelled `1..n` and
/// periods `1..T` unless labels are given.
pub fn write_panel<W: Write>(writer: W, panel: &PanelData, units: Option<&[String]>, periods: Option<&[i64]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["unit".to_string(), "period".into(), "y".into()];
    header.extend((1..=panel.kx()).map(|k| format!("x_{k}")));
    header.extend((1..=panel.kz()).map(|k| format!("z_{k}")));
    w.write_record(&header)?;
    for i in 0..panel.n() {
        let unit = units.map_or_else(|| (i + 1).to_string(), |u| u[i].clone());
        for t in 0..panel.periods() {
            let period = periods.map_or(t as i64 + 1, |p| p[t]);
            let mut rec = vec![unit.clone(), period.to_string(), panel.y()[(i, t)].to_string()];
            rec.extend(panel.x_at(t).row(i).iter().map(|v| v.to_string()));
            rec.extend(panel.z_at(t).row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    /// Spatial lag of the outcome, `M_{p,t}`.
    Lag,
    /// Spatial lag of the error, `M_{q,t}`.
    Error,
}

/// Weight families keyed by kind, each `[index][period]`.
#[derive(Debug, Clone, Default)]
pub struct WeightSet {
    pub lag: Vec<Vec<Arc<SpatialWeightMatrix>>>,
    pub error: Vec<Vec<Arc<SpatialWeightMatrix>>>,
}

type Triplets = Vec<(usize, usize, f64)>;

/// Reads weight triplets for the units and periods of `table`. Every family
/// must either give one all-period matrix or a matrix for each period.
/// Diagonal entries are rejected.
pub fn read_weights<R: Read>(reader: R, table: &PanelTable) -> Result<WeightSet> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let pos = |name: &str| headers.iter().position(|h| h == name);
    let (c_i, c_j, c_v) = (required(&headers, "i")?, required(&headers, "j")?, required(&headers, "value")?);
    let (c_kind, c_p, c_t) = (pos("kind"), pos("p"), pos("t"));

    let unit_index: HashMap<&str, usize> = table.units.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
    let period_index: HashMap<i64, usize> = table.periods.iter().enumerate().map(|(t, &p)| (p, t)).collect();
    // (kind, index) -> period (None = all) -> triplets
    let mut families: BTreeMap<(WeightKind, usize), BTreeMap<Option<usize>, Triplets>> = BTreeMap::new();
    let mut seen = std::collections::HashSet::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line());
        let kind = match c_kind.map(|c| &record[c]) {
            None | Some("") | Some("lag") => WeightKind::Lag,
            Some("error") => WeightKind::Error,
            Some(other) => return Err(parse_err(line, format!("unknown weight kind `{other}`"))),
        };
        let index = match c_p.map(|c| &record[c]) {
            None | Some("") => 0,
            Some(s) => match s.parse::<usize>() {
                Ok(p) if p >= 1 => p - 1,
                _ => return Err(parse_err(line, format!("matrix index `{s}` must be a positive integer"))),
            },
        };
        let period = match c_t.map(|c| &record[c]) {
            None | Some("") => None,
            Some(s) => {
                let label: i64 = s.parse().map_err(|_| parse_err(line, format!("period `{s}` is not an integer")))?;
                Some(
                    *period_index
                        .get(&label)
                        .ok_or_else(|| parse_err(line, format!("period {label} is not in the panel")))?,
                )
            }
        };
        let unit = |c: usize| {
            unit_index
                .get(&record[c])
                .copied()
                .ok_or_else(|| parse_err(line, format!("unit `{}` is not in the panel", &record[c])))
        };
        let (i, j) = (unit(c_i)?, unit(c_j)?);
        let v = float(&record, c_v, "value")?;
        if i == j && v != 0.0 {
            return Err(Error::NonZeroDiagonal { row: i, value: v });
        }
        if !seen.insert((kind, index, period, i, j)) {
            return Err(parse_err(line, format!("duplicate entry ({}, {})", &record[c_i], &record[c_j])));
        }
        families.entry((kind, index)).or_default().entry(period).or_default().push((i, j, v));
    }

    let n = table.n();
    let t_len = table.periods.len();
    let mut out = WeightSet::default();
    for ((kind, index), by_period) in families {
        let target = match kind {
            WeightKind::Lag => &mut out.lag,
            WeightKind::Error => &mut out.error,
        };
        if index != target.len() {
            return Err(parse_err(None, format!("{kind:?} weight matrices must be numbered 1..k without gaps")));
        }
        let all = by_period.contains_key(&None);
        if all && by_period.len() > 1 {
            return Err(parse_err(
                None,
                format!("{kind:?} matrix {} mixes all-period and per-period entries", index + 1),
            ));
        }
        let family = if all {
            let m = Arc::new(SpatialWeightMatrix::new(CsrMatrix::from_triplets(n, &by_period[&None])?)?);
            vec![m; t_len]
        } else {
            (0..t_len)
                .map(|t| {
                    let trip = by_period.get(&Some(t)).ok_or_else(|| {
                        parse_err(
                            None,
                            format!("{kind:?} matrix {} has no entries for period {}", index + 1, table.periods[t]),
                        )
                    })?;
                    Ok(Arc::new(SpatialWeightMatrix::new(CsrMatrix::from_triplets(n, trip)?)?))
                })
                .collect::<Result<Vec<_>>>()?
        };
        target.push(family);
    }
    Ok(out)
}

/// Writes every weight matrix of `panel`. Families that are identical in all
/// periods are written once with an empty period.
pub fn write_weights<W: Write>(writer: W, panel: &PanelData, units: Option<&[String]>, periods: Option<&[i64]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["kind", "p", "t", "i", "j", "value"])?;
    let label = |i: usize| units.map_or_else(|| (i + 1).to_string(), |u| u[i].clone());
    let families = (0..panel.n_lag_weights())
        .map(|p| ("lag", p, (0..panel.periods()).map(|t| panel.lag_weight(p, t)).collect::<Vec<_>>()))
        .chain((0..panel.n_error_weights()).map(|q| {
            ("error", q, (0..panel.periods()).map(|t| panel.error_weight(q, t)).collect::<Vec<_>>())
        }));
    for (kind, index, mats) in families {
        let constant = mats.iter().all(|m| m.entries() == mats[0].entries());
        let emit: Vec<(String, &SpatialWeightMatrix)> = if constant {
            vec![(String::new(), mats[0])]
        } else {
            mats.iter()
                .enumerate()
                .map(|(t, m)| (periods.map_or(t as i64 + 1, |p| p[t]).to_string(), *m))
                .collect()
        };
        for (t, m) in emit {
            for (i, j, v) in m.entries().iter() {
                w.write_record([kind.to_string(), (index + 1).to_string(), t.clone(), label(i), label(j), v.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const PANEL: &str = "unit,period,y,z_1\n\
        a,2001,1.5,0.1\n\
        b,2001,-2,0.2\n\
        c,2001,0.25,0.3\n\
        a,2002,3,0.4\n\
        b,2002,4,0.5\n\
        c,2002,5,0.6\n";

    #[test]
    fn panel_parses_balanced_long_format() {
        let t = read_panel(PANEL.as_bytes()).unwrap();
        assert_eq!(t.units, vec!["a", "b", "c"]);
        assert_eq!(t.periods, vec![2001, 2002]);
        assert_eq!(t.y[(1, 0)], -2.0);
        assert_eq!(t.z[1][(2, 0)], 0.6);
        assert_eq!(t.x[0].ncols(), 0);
    }

    #[test]
    fn unbalanced_and_duplicate_rows_are_rejected() {
        let short = PANEL.lines().take(6).collect::<Vec<_>>().join("\n");
        assert!(matches!(read_panel(short.as_bytes()), Err(Error::Parse(m)) if m.contains("unbalanced")));
        let dup = format!("{PANEL}a,2002,1,1\n");
        assert!(matches!(read_panel(dup.as_bytes()), Err(Error::Parse(m)) if m.contains("duplicate")));
        let gap = "unit,period,y,z_2\n1,1,0,0\n";
        assert!(read_panel(gap.as_bytes()).is_err());
    }

    #[test]
    fn weights_resolve_labels_and_periods() {
        let t = read_panel(PANEL.as_bytes()).unwrap();
        let csv = "kind,p,t,i,j,value\nlag,1,,a,b,1\nlag,1,,b,a,0.5\nlag,1,,b,c,0.5\nerror,1,2001,c,a,1\nerror,1,2002,a,c,1\n";
        let w = read_weights(csv.as_bytes(), &t).unwrap();
        assert_eq!(w.lag.len(), 1);
        assert_eq!(w.lag[0].len(), 2);
        assert_eq!(w.lag[0][1].entries().get(1, 2), 0.5);
        assert_eq!(w.error[0][0].entries().get(2, 0), 1.0);
        assert_eq!(w.error[0][1].entries().get(2, 0), 0.0);

        let diag = "i,j,value\na,a,1\n";
        assert!(matches!(read_weights(diag.as_bytes(), &t), Err(Error::NonZeroDiagonal { .. })));
        let partial = "t,i,j,value\n2001,a,b,1\n";
        assert!(read_weights(partial.as_bytes(), &t).is_err());
        let unknown = "i,j,value\na,d,1\n";
        assert!(read_weights(unknown.as_bytes(), &t).is_err());
    }

    #[test]
    fn round_trip_is_exact() {
        let t = read_panel(PANEL.as_bytes()).unwrap();
        let csv = "i,j,value\na,b,0.1\nb,c,0.30000000000000004\nc,a,1e-300\n";
        let w = read_weights(csv.as_bytes(), &t).unwrap();
        let (units, periods) = (t.units.clone(), t.periods.clone());
        let panel = t.clone().into_panel(w.lag, w.error).unwrap();
        let mut pbuf = Vec::new();
        write_panel(&mut pbuf, &panel, Some(&units), Some(&periods)).unwrap();
        let back = read_panel(pbuf.as_slice()).unwrap();
        assert_eq!(back, t);
        let mut wbuf = Vec::new();
        write_weights(&mut wbuf, &panel, Some(&units), Some(&periods)).unwrap();
        let w2 = read_weights(wbuf.as_slice(), &back).unwrap();
        assert_eq!(w2.lag[0][0].entries(), panel.lag_weight(0, 0).entries());
    }
}
