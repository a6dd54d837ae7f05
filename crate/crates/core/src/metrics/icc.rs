use super::{NotComputable, PairedSeries, Statistic};

/// Mean squares of the two-way ANOVA over the `n × 2` (target × column) table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IccAnova {
    /// Between targets (rows).
    pub ms_rows: f64,
    /// Between columns (truth vs prediction).
    pub ms_cols: f64,
    pub ms_error: f64,
    pub n: usize,
}

impl IccAnova {
    pub fn from_series(series: &PairedSeries) -> Self {
        let n = series.len();
        let nf = n as f64;
        let (t, p) = (series.truth(), series.prediction());
        let grand = (t.iter().sum::<f64>() + p.iter().sum::<f64>()) / (2.0 * nf);
        let col_t = t.iter().sum::<f64>() / nf;
        let col_p = p.iter().sum::<f64>() / nf;
        let mut ss_rows = 0.0;
        let mut ss_err = 0.0;
        for (a, b) in t.iter().zip(p) {
            let row = (a + b) / 2.0;
            ss_rows += 2.0 * (row - grand).powi(2);
            ss_err += (a - row - col_t + grand).powi(2) + (b - row - col_p + grand).powi(2);
        }
        let ss_cols = nf * ((col_t - grand).powi(2) + (col_p - grand).powi(2));
        Self {
            ms_rows: ss_rows / (nf - 1.0),
            ms_cols: ss_cols,
            ms_error: ss_err / (nf - 1.0),
            n,
        }
    }

    /// ICC(2,1): two-way random effects, absolute agreement, single rater.
    pub fn icc(&self) -> Statistic {
        if self.n < 3 {
            return Err(NotComputable("ICC needs at least three targets"));
        }
        if self.ms_rows <= 0.0 {
            return Err(NotComputable("zero between-target variance"));
        }
        let denom =
            self.ms_rows + self.ms_error + (2.0 / self.n as f64) * (self.ms_cols - self.ms_error);
        if denom <= 0.0 {
            return Err(NotComputable("non-positive ICC denominator"));
        }
        Ok((self.ms_rows - self.ms_error) / denom)
    }
}

/// ICC(2,1) between the truth and prediction columns.
pub fn icc(series: &PairedSeries) -> Statistic {
    IccAnova::from_series(series).icc()
}
