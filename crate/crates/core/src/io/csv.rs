//! CSV traces with fixed headers and `%g`-style numbers.

use crate::train::{EpochRecord, EvalReport};

pub const TRACE_HEADER: &str = "epoch,l_per,l_d,l_t,l_a,l_rec,total,psnr,ssim";
pub const EVAL_HEADER: &str = "image,psnr,ssim";

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Six significant digits, shortest of fixed or exponent form like C's `%g`.
/// Always uses a period as decimal separator.
pub fn fmt_g(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf" } else { "-inf" }.into();
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0" } else { "0" }.into();
    }
    // Rounding to 6 digits first decides the exponent, as printf does.
    let sci = format!("{v:.5e}");
    let (mant, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp) as usize;
        strip_zeros(&format!("{v:.decimals$}")).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", strip_zeros(mant), exp.abs())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_g).unwrap_or_default()
}

pub fn trace_row(r: &EpochRecord) -> String {
    let l = &r.losses;
    let terms: Vec<String> = [l.l_per, l.l_d, l.l_t, l.l_a, l.l_rec, l.total].into_iter().map(fmt_g).collect();
    format!("{},{},{},{}", r.epoch, terms.join(","), opt(r.psnr), opt(r.ssim))
}

pub fn trace_csv(trace: &[EpochRecord]) -> String {
    let mut s = format!("{TRACE_HEADER}\n");
    for r in trace {
        s.push_str(&trace_row(r));
        s.push('\n');
    }
    s
}

/// Per-image rows, then a `mean` row.
pub fn eval_csv(report: &EvalReport) -> String {
    let mut s = format!("{EVAL_HEADER}\n");
    for r in &report.rows {
        s.push_str(&format!("{},{},{}\n", r.index, fmt_g(r.psnr), fmt_g(r.ssim)));
    }
    s.push_str(&format!("mean,{},{}\n", fmt_g(report.mean_psnr), fmt_g(report.mean_ssim)));
    s
}
