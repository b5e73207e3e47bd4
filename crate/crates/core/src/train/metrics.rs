use std::io::Write;

use crate::error::Result;

/// One logged training step, averaged over the minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    /// `penalty − loglik`.
    pub loss: f64,
    pub loglik: f64,
    pub penalty: f64,
    /// Mean iterations per block column.
    pub mean_n: Vec<f64>,
    /// MACs per example.
    pub flops: f64,
    pub accuracy: f64,
    pub grad_logvar: Option<f64>,
    pub wall_ms: Option<f64>,
}

pub fn metrics_header(blocks: usize) -> Vec<String> {
    let mut h: Vec<String> = ["step", "loss", "loglik", "penalty"].map(String::from).to_vec();
    h.extend((1..=blocks).map(|k| format!("mean_n_block{k}")));
    h.extend(["flops", "accuracy", "grad_logvar", "wall_ms"].map(String::from));
    h
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV sink for [`MetricsRow`]s with a fixed number of block columns.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
    blocks: usize,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W, blocks: usize) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(metrics_header(blocks))?;
        Ok(Self { inner, blocks })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        debug_assert_eq!(row.mean_n.len(), self.blocks);
        let mut rec = vec![
            row.step.to_string(),
            row.loss.to_string(),
            row.loglik.to_string(),
            row.penalty.to_string(),
        ];
        rec.extend(row.mean_n.iter().map(|n| n.to_string()));
        rec.extend([
            row.flops.to_string(),
            row.accuracy.to_string(),
            opt(row.grad_logvar),
            opt(row.wall_ms),
        ]);
        self.inner.write_record(rec)?;
        self.inner.flush()?;
        Ok(())
    }
}
