//! Plain-text table and CSV rendering for reports.

use crate::channel::TransferReport;

/// Rows of string cells under a fixed header. Table and CSV output are both
/// rendered from the same cells, so they always agree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grid {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Grid {
    pub fn new(headers: &[&str]) -> Self {
        Grid {
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    /// Left-aligned first column, right-aligned numbers, space separated.
    pub fn to_table(&self) -> String {
        let n = self.headers.len();
        let mut width: Vec<usize> = self.headers.iter().map(|h| h.chars().count()).collect();
        for r in &self.rows {
            for (w, c) in width.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (i, c) in cells.iter().enumerate() {
                if i > 0 {
                    s.push_str("  ");
                }
                let pad = width[i] - c.chars().count();
                if i < 3 {
                    s.push_str(c);
                    if i + 1 < n {
                        s.push_str(&" ".repeat(pad));
                    }
                } else {
                    s.push_str(&" ".repeat(pad));
                    s.push_str(c);
                }
            }
            s.push('\n');
            s
        };
        let mut out = line(&self.headers);
        let total: usize = width.iter().sum::<usize>() + 2 * (n - 1);
        out.push_str(&"-".repeat(total));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers).expect("writing to memory");
        for r in &self.rows {
            w.write_record(r).expect("writing to memory");
        }
        String::from_utf8(w.into_inner().expect("writing to memory")).expect("cells are UTF-8")
    }
}

pub fn fmt_mb(bytes: u64) -> String {
    format!("{:.6}", bytes as f64 / 1e6)
}

pub fn fmt_s(s: f64) -> String {
    format!("{s:.6}")
}

/// One row per phase of a delivery, plus the proxy total when an update was
/// delivered.
pub fn transfer_grid(r: &TransferReport) -> Grid {
    let mut g = Grid::new(&[
        "Phase",
        "Bytes",
        "Size (MB)",
        "Encode (s)",
        "Channel (s)",
        "Decode (s)",
        "Dequantize/Apply (s)",
        "Latency (s)",
    ]);
    g.push(vec![
        "Low-Prec.".into(),
        r.base.encoded_bytes.to_string(),
        fmt_mb(r.base.encoded_bytes),
        fmt_s(r.base.encode_s),
        fmt_s(r.base.channel_s),
        fmt_s(r.base.decode_s),
        fmt_s(r.base.dequantize_s),
        fmt_s(r.startup_latency_low_s),
    ]);
    if let (Some(u), Some(proxy)) = (r.update, r.startup_latency_proxy_s) {
        g.push(vec![
            "Update".into(),
            u.encoded_bytes.to_string(),
            fmt_mb(u.encoded_bytes),
            fmt_s(u.encode_s),
            fmt_s(u.channel_s),
            fmt_s(u.decode_s),
            fmt_s(r.apply_s),
            fmt_s(proxy - r.startup_latency_low_s),
        ]);
        g.push(vec![
            "Proxy".into(),
            r.total_bytes.to_string(),
            fmt_mb(r.total_bytes),
            fmt_s(r.base.encode_s + u.encode_s),
            fmt_s(r.sequenced_channel_s()),
            fmt_s(r.base.decode_s + u.decode_s),
            fmt_s(r.base.dequantize_s + r.apply_s),
            fmt_s(proxy),
        ]);
    }
    g
}
