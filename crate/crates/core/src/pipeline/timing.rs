use std::io::Write;

use crate::error::Result;

/// Wall-clock milliseconds of the five pipeline stages.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimings {
    pub rescale: f64,
    pub r2: f64,
    pub transform: f64,
    pub se2: f64,
    pub matching: f64,
    /// Measured around all five stages.
    pub total: f64,
}

impl StageTimings {
    pub const STAGES: [&'static str; 5] = ["rescaling", "r2_processing", "os_transform", "se2_processing", "matching"];

    pub fn stages(&self) -> [f64; 5] {
        [self.rescale, self.r2, self.transform, self.se2, self.matching]
    }

    pub fn stage_sum(&self) -> f64 {
        self.stages().iter().sum()
    }

    pub fn is_valid(&self) -> bool {
        self.stages().iter().chain([&self.total]).all(|v| *v >= 0.0 && v.is_finite())
    }
}

/// `image_id,rescaling,…,matching,total` rows plus a mean row.
pub fn write_timings_csv<W: Write>(w: W, rows: &[(String, StageTimings)]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["image_id"];
    header.extend(StageTimings::STAGES);
    header.push("total");
    wtr.write_record(&header)?;
    let fmt = |t: &StageTimings| -> Vec<String> {
        t.stages().iter().chain([&t.total]).map(|v| format!("{v:.3}")).collect()
    };
    let mut mean = StageTimings::default();
    for (id, t) in rows {
        let mut rec = vec![id.clone()];
        rec.extend(fmt(t));
        wtr.write_record(&rec)?;
        mean.rescale += t.rescale;
        mean.r2 += t.r2;
        mean.transform += t.transform;
        mean.se2 += t.se2;
        mean.matching += t.matching;
        mean.total += t.total;
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        for v in [
            &mut mean.rescale,
            &mut mean.r2,
            &mut mean.transform,
            &mut mean.se2,
            &mut mean.matching,
            &mut mean.total,
        ] {
            *v /= n;
        }
        let mut rec = vec!["mean".to_string()];
        rec.extend(fmt(&mean));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}
