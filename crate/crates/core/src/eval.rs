//! Single-query retrieval evaluation.
//!
//! Gallery entries sharing both identity and camera with the query are
//! ignored. Ranking is by ascending Euclidean distance, ties broken by
//! gallery index. Queries without any remaining true match are excluded.

use std::fmt;
use std::str::FromStr;

use log::warn;
use serde_json::json;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{HaaModel, Variant};
use crate::nn::{ParamStore, Session};
use crate::tensor::Real;

pub const DEFAULT_MAX_RANK: usize = 20;
const CHUNK: usize = 64;

/// Identity and camera of one embedded image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Meta {
    pub id: usize,
    pub camera: u8,
}

/// Row-major `[rows, cols]` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("matrix rows differ in length"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// `D[q][g] = |q - g|` via `|q|^2 + |g|^2 - 2 q.g`, negatives clamped to 0.
pub fn distance_matrix(queries: &[Vec<f64>], gallery: &[Vec<f64>]) -> Result<Matrix> {
    let d = queries.first().or(gallery.first()).map_or(0, Vec::len);
    if let Some(bad) = queries.iter().chain(gallery).find(|v| v.len() != d) {
        return Err(Error::invalid(format!("embedding length {} differs from {d}", bad.len())));
    }
    let sq = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>();
    let gn: Vec<f64> = gallery.iter().map(sq).collect();
    let mut data = Vec::with_capacity(queries.len() * gallery.len());
    for q in queries {
        let qn = sq(q);
        for (g, gn) in gallery.iter().zip(&gn) {
            let dot: f64 = q.iter().zip(g).map(|(a, b)| a * b).sum();
            data.push((qn + gn - 2.0 * dot).max(0.0).sqrt());
        }
    }
    Ok(Matrix {
        rows: queries.len(),
        cols: gallery.len(),
        data,
    })
}

fn check_meta(d: &Matrix, q: &[Meta], g: &[Meta]) -> Result<()> {
    if d.rows != q.len() || d.cols != g.len() {
        return Err(Error::invalid(format!(
            "distance matrix {}x{} does not match {} queries and {} gallery entries",
            d.rows,
            d.cols,
            q.len(),
            g.len()
        )));
    }
    Ok(())
}

/// Relevance flags of the usable gallery, best match first. `None` if no true match remains.
fn ranked_relevance(d: &Matrix, qi: usize, q: Meta, gallery: &[Meta]) -> Option<Vec<bool>> {
    let mut order: Vec<usize> = (0..gallery.len())
        .filter(|&j| !(gallery[j].id == q.id && gallery[j].camera == q.camera))
        .collect();
    let row = d.row(qi);
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    let rel: Vec<bool> = order.iter().map(|&j| gallery[j].id == q.id).collect();
    rel.contains(&true).then_some(rel)
}

/// Rank-k accuracies plus query counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Cmc {
    pub curve: Vec<f64>,
    pub valid: usize,
    pub excluded: usize,
}

pub fn cmc(d: &Matrix, q: &[Meta], g: &[Meta], max_rank: usize) -> Result<Cmc> {
    check_meta(d, q, g)?;
    let mut max_rank = max_rank.max(1);
    if max_rank > g.len() {
        warn!("max rank {max_rank} exceeds the gallery size {}; truncating", g.len());
        max_rank = g.len().max(1);
    }
    let mut hits = vec![0usize; max_rank];
    let (mut valid, mut excluded) = (0, 0);
    for (qi, &qm) in q.iter().enumerate() {
        let Some(rel) = ranked_relevance(d, qi, qm, g) else {
            excluded += 1;
            continue;
        };
        valid += 1;
        let first = rel.iter().position(|&r| r).expect("has a match");
        for h in hits.iter_mut().skip(first) {
            *h += 1;
        }
    }
    let curve = hits.iter().map(|&h| if valid == 0 { 0.0 } else { h as f64 / valid as f64 }).collect();
    Ok(Cmc { curve, valid, excluded })
}

/// Average precision of one ranked relevance list.
pub fn average_precision(rel: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &r) in rel.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

pub fn mean_ap(d: &Matrix, q: &[Meta], g: &[Meta]) -> Result<f64> {
    check_meta(d, q, g)?;
    let aps: Vec<f64> = q
        .iter()
        .enumerate()
        .filter_map(|(qi, &qm)| ranked_relevance(d, qi, qm, g))
        .map(|rel| average_precision(&rel))
        .collect();
    Ok(if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub map: f64,
    pub cmc: Vec<f64>,
    pub num_queries: usize,
    pub num_excluded: usize,
}

impl EvalReport {
    pub fn from_distances(d: &Matrix, q: &[Meta], g: &[Meta], max_rank: usize) -> Result<Self> {
        let c = cmc(d, q, g, max_rank)?;
        Ok(Self {
            map: mean_ap(d, q, g)?,
            cmc: c.curve,
            num_queries: c.valid,
            num_excluded: c.excluded,
        })
    }

    pub fn rank(&self, k: usize) -> f64 {
        self.cmc.get(k.saturating_sub(1)).copied().unwrap_or(f64::NAN)
    }

    pub fn to_json(&self) -> String {
        let v = json!({
            "map": self.map,
            "cmc": self.cmc,
            "num_queries": self.num_queries,
            "num_excluded": self.num_excluded,
        });
        serde_json::to_string_pretty(&v).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let bad = |d: String| Error::format("report", d);
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        let num = |k: &str| v[k].as_f64().ok_or_else(|| bad(format!("missing `{k}`")));
        let cmc = v["cmc"]
            .as_array()
            .ok_or_else(|| bad("missing `cmc`".into()))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| bad("non-numeric cmc entry".into())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            map: num("map")?,
            cmc,
            num_queries: num("num_queries")? as usize,
            num_excluded: num("num_excluded")? as usize,
        })
    }

    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out += &format!("map,{}\n", self.map);
        for (k, v) in self.cmc.iter().enumerate() {
            out += &format!("rank{},{v}\n", k + 1);
        }
        out += &format!("num_queries,{}\nnum_excluded,{}\n", self.num_queries, self.num_excluded);
        out
    }
}

/// Which queries take part in an evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subset {
    All,
    Black,
    NonBlack,
}

impl Subset {
    pub fn admits(self, black: bool) -> bool {
        match self {
            Subset::All => true,
            Subset::Black => black,
            Subset::NonBlack => !black,
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subset::All => "all",
            Subset::Black => "black",
            Subset::NonBlack => "nonblack",
        })
    }
}

impl FromStr for Subset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Subset::All),
            "black" => Ok(Subset::Black),
            "nonblack" => Ok(Subset::NonBlack),
            _ => Err(Error::invalid(format!("unknown subset `{s}` (expected all, black or nonblack)"))),
        }
    }
}

/// Descriptors for the given samples, without augmentation.
pub fn embed_set<T: Real>(model: &HaaModel, store: &ParamStore<T>, ds: &Dataset, idx: &[usize]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(CHUNK) {
        let mut s = Session::new(store, false);
        let x = s.input(ds.batch(chunk)?.cast());
        let f = model.forward(&mut s, x)?.f;
        let v = s.graph.value(f);
        if v.shape()[1] != model.descriptor_dim() {
            return Err(Error::shape("embed_set", v.shape(), &[chunk.len(), model.descriptor_dim()]));
        }
        out.extend(v.to_f64().chunks(model.descriptor_dim()).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Fusion weights `(w1, w2)` of the adaptive variant for the given samples.
pub fn fusion_weights<T: Real>(model: &HaaModel, store: &ParamStore<T>, ds: &Dataset, idx: &[usize]) -> Result<Vec<[f64; 2]>> {
    if model.variant != Variant::Haa {
        return Err(Error::invalid(format!("variant {} has no fusion weights", model.variant)));
    }
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(CHUNK) {
        let mut s = Session::new(store, false);
        let x = s.input(ds.batch(chunk)?.cast());
        let w = model.forward(&mut s, x)?.weights.expect("adaptive variant has weights");
        out.extend(s.graph.value(w).to_f64().chunks(2).map(|r| [r[0], r[1]]));
    }
    Ok(out)
}

/// Mean `w2` over black and non-black test images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightStats {
    pub black_w2: f64,
    pub nonblack_w2: f64,
}

pub fn weight_stats<T: Real>(model: &HaaModel, store: &ParamStore<T>, ds: &Dataset) -> Result<WeightStats> {
    let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.records[i].split != Split::Train).collect();
    let w = fusion_weights(model, store, ds, &idx)?;
    let mean = |black: bool| {
        let v: Vec<f64> = idx
            .iter()
            .zip(&w)
            .filter(|(&i, _)| ds.records[i].black == black)
            .map(|(_, w)| w[1])
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    Ok(WeightStats {
        black_w2: mean(true),
        nonblack_w2: mean(false),
    })
}

/// Embeds query and gallery once; reports can then be cut per subset.
pub struct Evaluation {
    pub query_idx: Vec<usize>,
    pub gallery_idx: Vec<usize>,
    pub distances: Matrix,
}

impl Evaluation {
    pub fn new<T: Real>(model: &HaaModel, store: &ParamStore<T>, ds: &Dataset) -> Result<Self> {
        let query_idx = ds.indices(Split::Query);
        let gallery_idx = ds.indices(Split::Gallery);
        if query_idx.is_empty() || gallery_idx.is_empty() {
            return Err(Error::invalid("dataset needs query and gallery samples"));
        }
        let q = embed_set(model, store, ds, &query_idx)?;
        let g = embed_set(model, store, ds, &gallery_idx)?;
        Ok(Self {
            distances: distance_matrix(&q, &g)?,
            query_idx,
            gallery_idx,
        })
    }

    pub fn report(&self, ds: &Dataset, subset: Subset, max_rank: usize) -> Result<EvalReport> {
        let meta = |i: usize| Meta {
            id: ds.records[i].id,
            camera: ds.records[i].camera,
        };
        let rows: Vec<usize> = (0..self.query_idx.len())
            .filter(|&r| subset.admits(ds.records[self.query_idx[r]].black))
            .collect();
        let d = Matrix {
            rows: rows.len(),
            cols: self.distances.cols,
            data: rows.iter().flat_map(|&r| self.distances.row(r).to_vec()).collect(),
        };
        let q: Vec<Meta> = rows.iter().map(|&r| meta(self.query_idx[r])).collect();
        let g: Vec<Meta> = self.gallery_idx.iter().map(|&i| meta(i)).collect();
        EvalReport::from_distances(&d, &q, &g, max_rank)
    }
}

/// Embeds the query and gallery splits and reports one subset.
pub fn evaluate<T: Real>(model: &HaaModel, store: &ParamStore<T>, ds: &Dataset, subset: Subset, max_rank: usize) -> Result<EvalReport> {
    Evaluation::new(model, store, ds)?.report(ds, subset, max_rank)
}
