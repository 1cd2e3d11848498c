use serde::Serialize;

use super::codes::{hamming, hamming_words, PackedCodeSet};
use super::geometry::{map_box_to_feature, BoundingBox, FeatureBox};
use crate::error::{domain_err, Result};

/// Default sliding-window stride on the 1/4-resolution map.
pub const WINDOW_STRIDE: usize = 5;

/// Best window found on one candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct WindowMatch {
    pub candidate_id: u64,
    /// Feature-space origin (row, col).
    pub origin: (usize, usize),
    pub score: u32,
    /// Pixel-space box: origin scaled by the downsample factor, query box size.
    pub pixel_box: BoundingBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Ranked {
    pub id: u64,
    pub distance: u32,
    pub window: Option<WindowMatch>,
}

/// Ranked candidates, ascending distance with ascending id on ties.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RetrievalResult {
    pub results: Vec<Ranked>,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<u64> {
        self.results.iter().map(|r| r.id).collect()
    }
}

/// The `k` nearest codes by Hamming distance; `k > N` returns all `N`.
pub fn top_k_global(query: &[u64], db: &PackedCodeSet, k: usize) -> Result<RetrievalResult> {
    if k == 0 {
        return domain_err("k must be at least 1");
    }
    if db.is_empty() {
        return domain_err("cannot search an empty code database");
    }
    hamming(query, db.code(0))?;
    let mut scored: Vec<(u32, u64)> = (0..db.len())
        .map(|r| (hamming_words(query, db.code(r)), db.id(r)))
        .collect();
    let k = k.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable(k - 1);
        scored.truncate(k);
    }
    scored.sort_unstable();
    Ok(RetrievalResult {
        results: scored
            .into_iter()
            .map(|(distance, id)| Ranked {
                id,
                distance,
                window: None,
            })
            .collect(),
    })
}

/// Window origins along one axis: multiples of `stride`, the flush-end origin,
/// and `anchor` when given (the query's own origin during self-matching).
pub fn axis_origins(extent: usize, window: usize, stride: usize, anchor: Option<usize>) -> Result<Vec<usize>> {
    if window == 0 || window > extent {
        return domain_err(format!("window of {window} does not fit an axis of {extent}"));
    }
    if stride == 0 {
        return domain_err("stride must be positive");
    }
    let last = extent - window;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    out.push(last);
    if let Some(a) = anchor {
        if a > last {
            return domain_err(format!("anchor origin {a} past the last origin {last}"));
        }
        out.push(a);
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// All window origins in row-major order.
pub fn window_origins(
    map: (usize, usize),
    window: (usize, usize),
    stride: usize,
    anchor: Option<(usize, usize)>,
) -> Result<Vec<(usize, usize)>> {
    let rows = axis_origins(map.0, window.0, stride, anchor.map(|a| a.0))?;
    let cols = axis_origins(map.1, window.1, stride, anchor.map(|a| a.1))?;
    Ok(rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect())
}

/// Query side of a window scan: the query's local code and its mapped window.
#[derive(Clone, Copy, Debug)]
pub struct WindowQuery<'a> {
    pub code: &'a [u64],
    pub window: FeatureBox,
    /// Query box in pixels; matched windows keep its size.
    pub pixels: BoundingBox,
    pub stride: usize,
    pub downsample: usize,
    /// Extra origin scanned on every candidate, normally the query's own.
    pub anchor: Option<(usize, usize)>,
}

impl<'a> WindowQuery<'a> {
    /// Standard scan for a pixel box: stride 5 on the 1/4 map, anchored at the box origin.
    pub fn for_box(code: &'a [u64], pixels: BoundingBox, downsample: usize) -> Result<Self> {
        let window = map_box_to_feature(&pixels, downsample)?;
        Ok(WindowQuery {
            code,
            window,
            pixels,
            stride: WINDOW_STRIDE,
            downsample,
            anchor: Some((window.row, window.col)),
        })
    }

    pub fn origins(&self, map: (usize, usize)) -> Result<Vec<(usize, usize)>> {
        window_origins(map, (self.window.height, self.window.width), self.stride, self.anchor)
    }
}

/// Slides a query-sized window over a candidate map and keeps the window whose
/// code is nearest the query; ties go to the row-major earliest origin.
///
/// `hash_windows` maps a list of windows to their packed codes.
pub fn sliding_window_match<F>(
    query: &WindowQuery<'_>,
    candidate_id: u64,
    map: (usize, usize),
    hash_windows: F,
) -> Result<WindowMatch>
where
    F: FnOnce(&[FeatureBox]) -> Result<Vec<Vec<u64>>>,
{
    let origins = query.origins(map)?;
    let windows: Vec<FeatureBox> = origins
        .iter()
        .map(|&(row, col)| FeatureBox {
            row,
            col,
            height: query.window.height,
            width: query.window.width,
        })
        .collect();
    let codes = hash_windows(&windows)?;
    if codes.len() != windows.len() {
        return domain_err(format!("{} codes for {} windows", codes.len(), windows.len()));
    }
    let mut best: Option<(u32, usize)> = None;
    for (i, code) in codes.iter().enumerate() {
        let d = hamming(query.code, code)?;
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, i));
        }
    }
    let (score, i) = best.expect("at least one origin");
    let (row, col) = origins[i];
    let (x1, y1) = (col * query.downsample, row * query.downsample);
    Ok(WindowMatch {
        candidate_id,
        origin: (row, col),
        score,
        pixel_box: BoundingBox::new(x1, y1, x1 + query.pixels.width(), y1 + query.pixels.height())?,
    })
}

/// Orders window matches by score, then id, and keeps the best `n`.
pub fn local_rerank(matches: Vec<WindowMatch>, n: usize) -> Result<RetrievalResult> {
    if n == 0 {
        return domain_err("n must be at least 1");
    }
    let mut matches = matches;
    matches.sort_by_key(|m| (m.score, m.candidate_id));
    matches.truncate(n);
    Ok(RetrievalResult {
        results: matches
            .into_iter()
            .map(|m| Ranked {
                id: m.candidate_id,
                distance: m.score,
                window: Some(m),
            })
            .collect(),
    })
}
