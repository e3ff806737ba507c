//! Additive emission totals and a deterministic chunked reduce.

use std::collections::BTreeMap;
use std::ops::AddAssign;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::emissions::SegmentEmission;

/// Rows per reduction chunk. Fixed so that floating point sums do not depend
/// on the number of worker threads.
pub const REDUCE_CHUNK: usize = 8192;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EmissionAggregate {
    pub co2e_kg: f64,
    pub fuel_l: f64,
    pub dist_km: f64,
    pub segment_count: u64,
}

impl EmissionAggregate {
    pub fn of(e: &SegmentEmission) -> Self {
        EmissionAggregate {
            co2e_kg: e.co2e_kg,
            fuel_l: e.fuel_l,
            dist_km: e.corrected_m / 1000.0,
            segment_count: 1,
        }
    }

    pub fn add(&mut self, e: &SegmentEmission) {
        *self += EmissionAggregate::of(e);
    }

    pub fn scaled(&self, k: f64) -> Self {
        EmissionAggregate {
            co2e_kg: self.co2e_kg * k,
            fuel_l: self.fuel_l * k,
            dist_km: self.dist_km * k,
            segment_count: self.segment_count,
        }
    }
}

impl AddAssign for EmissionAggregate {
    fn add_assign(&mut self, o: Self) {
        self.co2e_kg += o.co2e_kg;
        self.fuel_l += o.fuel_l;
        self.dist_km += o.dist_km;
        self.segment_count += o.segment_count;
    }
}

/// Groups rows by `key` (rows mapping to `None` are skipped). Each fixed-size
/// chunk is summed sequentially and chunk results are merged in input order,
/// so the result is bit-identical for any thread count.
pub fn reduce_by<K, F>(rows: &[SegmentEmission], key: F) -> BTreeMap<K, EmissionAggregate>
where
    K: Ord + Send,
    F: Fn(&SegmentEmission) -> Option<K> + Sync,
{
    let partials: Vec<BTreeMap<K, EmissionAggregate>> = rows
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| {
            let mut m: BTreeMap<K, EmissionAggregate> = BTreeMap::new();
            for e in chunk {
                if let Some(k) = key(e) {
                    m.entry(k).or_default().add(e);
                }
            }
            m
        })
        .collect();
    let mut out = BTreeMap::new();
    for p in partials {
        for (k, v) in p {
            *out.entry(k).or_default() += v;
        }
    }
    out
}

pub fn grand_total(rows: &[SegmentEmission]) -> EmissionAggregate {
    reduce_by(rows, |_| Some(())).remove(&()).unwrap_or_default()
}
