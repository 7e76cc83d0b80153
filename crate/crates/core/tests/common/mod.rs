//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Plain seven-deep loop 3D cross-correlation with zero padding over
/// `N x C x D x H x W` input and `O x C x KD x KH x KW` weights.
pub fn conv3d_oracle(
    x: &[f64],
    xd: [usize; 5],
    w: &[f64],
    k: [usize; 3],
    out_channels: usize,
    bias: Option<&[f64]>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> (Vec<f64>, [usize; 5]) {
    let [n, c, d, h, wd] = xd;
    let o_ext = |ax: usize, len: usize| (len + 2 * pad[ax] - k[ax]) / stride[ax] + 1;
    let (od, oh, ow) = (o_ext(0, d), o_ext(1, h), o_ext(2, wd));
    let mut out = vec![0.0; n * out_channels * od * oh * ow];
    let at = |v: usize, ax: usize, t: usize| (v * stride[ax] + t) as isize - pad[ax] as isize;
    for s in 0..n {
        for o in 0..out_channels {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = bias.map_or(0.0, |b| b[o]);
                        for i in 0..c {
                            for a in 0..k[0] {
                                for b in 0..k[1] {
                                    for e in 0..k[2] {
                                        let (iz, iy, ix) = (at(z, 0, a), at(y, 1, b), at(xx, 2, e));
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= d || iy >= h || ix >= wd {
                                            continue;
                                        }
                                        let xi = (((s * c + i) * d + iz) * h + iy) * wd + ix;
                                        let wi = (((o * c + i) * k[0] + a) * k[1] + b) * k[2] + e;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        out[(((s * out_channels + o) * od + z) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
    }
    (out, [n, out_channels, od, oh, ow])
}

/// Average ranks by counting: `1 + #smaller + #other-equal / 2`.
pub fn rank_oracle(x: &[f64]) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let smaller = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().enumerate().filter(|&(j, &u)| j != i && u == v).count() as f64;
            1.0 + smaller + equal / 2.0
        })
        .collect()
}

/// Textbook Pearson correlation with two-pass means.
pub fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx.sqrt() * syy.sqrt())
}

pub fn spearman_oracle(x: &[f64], y: &[f64]) -> f64 {
    pearson_oracle(&rank_oracle(x), &rank_oracle(y))
}

/// `1 - 6 sum d^2 / (n (n^2 - 1))`, exact only without ties.
pub fn spearman_distinct_oracle(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (rank_oracle(x), rank_oracle(y));
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

pub fn hysnet_bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_hysnet"))
}

/// Runs the CLI with `args` and returns its output.
pub fn run_cli<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(hysnet_bin())
        .args(args)
        .output()
        .expect("hysnet binary runs")
}

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Data rows of a CSV file, header removed.
pub fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    r.records()
        .map(|rec| rec.expect("valid csv row").iter().map(str::to_string).collect())
        .collect()
}
