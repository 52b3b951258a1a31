//! Tiny generator checked against a loop-by-loop evaluation of the same
//! architecture, driven only by the public tensor table.

use std::collections::HashMap;

use lamino::dipnet::{ArchConfig, DipNetwork, NoiseInput};
use lamino::Dims;

type Map = Vec<Vec<Vec<f64>>>; // [channel][y][x]

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

struct Params<'a> {
    params: &'a [f64],
    table: HashMap<String, (usize, Vec<usize>)>,
}

impl Params<'_> {
    fn w(&self, layer: &str, co: usize, ci: usize, ky: usize, kx: usize) -> f64 {
        let (off, shape) = &self.table[&format!("{layer}.weight")];
        self.params[off + ((co * shape[1] + ci) * shape[2] + ky) * shape[3] + kx]
    }

    fn b(&self, layer: &str, co: usize) -> f64 {
        self.params[self.table[&format!("{layer}.bias")].0 + co]
    }

    fn cout(&self, layer: &str) -> usize {
        self.table[&format!("{layer}.weight")].1[0]
    }

    fn kernel(&self, layer: &str) -> usize {
        self.table[&format!("{layer}.weight")].1[2]
    }
}

fn conv(p: &Params, layer: &str, x: &Map, stride: usize) -> Map {
    let (cin, h, w) = (x.len(), x[0].len(), x[0][0].len());
    let k = p.kernel(layer);
    let half = (k / 2) as isize;
    let (oh, ow) = (h / stride, w / stride);
    (0..p.cout(layer))
        .map(|co| {
            (0..oh)
                .map(|oy| {
                    (0..ow)
                        .map(|ox| {
                            let mut acc = p.b(layer, co);
                            for ci in 0..cin {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let yy = reflect((oy * stride) as isize + ky as isize - half, h);
                                        let xx = reflect((ox * stride) as isize + kx as isize - half, w);
                                        acc += p.w(layer, co, ci, ky, kx) * x[ci][yy][xx];
                                    }
                                }
                            }
                            acc
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn lrelu(mut x: Map, slope: f64) -> Map {
    x.iter_mut().flatten().flatten().for_each(|v| {
        if *v < 0.0 {
            *v *= slope
        }
    });
    x
}

fn upsample(x: &Map) -> Map {
    x.iter()
        .map(|c| (0..2 * c.len()).map(|y| (0..2 * c[0].len()).map(|xx| c[y / 2][xx / 2]).collect()).collect())
        .collect()
}

fn oracle(net: &DipNetwork, z: &NoiseInput) -> Vec<f64> {
    let arch = net.arch();
    let d = net.dims();
    let table = net.tensor_table().into_iter().map(|t| (t.name, (t.offset, t.shape))).collect();
    let p = Params { params: net.params(), table };
    let s = arch.leaky_slope;
    let mut x: Map = (0..d.nz)
        .map(|c| (0..d.ny).map(|y| (0..d.nx).map(|xx| z.values[c * d.ny * d.nx + y * d.nx + xx]).collect()).collect())
        .collect();
    let mut skips = Vec::new();
    for st in 0..arch.stages {
        x = lrelu(conv(&p, &format!("enc{st}.conv"), &x, 1), s);
        skips.push(x.clone());
        x = lrelu(conv(&p, &format!("enc{st}.down"), &x, 2), s);
    }
    for i in 0..arch.bottleneck_convs {
        x = lrelu(conv(&p, &format!("mid{i}.conv"), &x, 1), s);
    }
    for st in (0..arch.stages).rev() {
        let mut cat = upsample(&x);
        cat.extend(skips[st].iter().cloned());
        x = lrelu(conv(&p, &format!("dec{st}.conv"), &cat, 1), s);
    }
    let head = conv(&p, "head.conv", &x, 1);
    head.into_iter().flatten().flatten().map(|v| arch.output_bound * v.tanh()).collect()
}

fn check(arch: ArchConfig, dims: Dims, seed: u64) {
    let net = DipNetwork::new(arch, dims, 1.0, seed).unwrap();
    let z = NoiseInput::new(dims, seed + 1);
    assert!(z.values.iter().all(|&v| (0.0..0.1).contains(&v)));
    let (out, _) = net.forward(&z).unwrap();
    let want = oracle(&net, &z);
    assert_eq!(out.values().len(), want.len());
    let err = out.values().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-12, "max deviation {err:e}");
    assert!(out.values().iter().any(|v| v.abs() > 1e-6));
}

#[test]
fn tiny_network_matches_loop_oracle() {
    let arch = ArchConfig { stages: 1, widths: vec![2], bottleneck_width: 2, init_gain: 1.0, ..ArchConfig::default() };
    check(arch, Dims::new(8, 8, 4), 3);
}

#[test]
fn two_stage_network_matches_loop_oracle() {
    let arch = ArchConfig { widths: vec![3, 4], bottleneck_width: 5, bottleneck_convs: 2, init_gain: 0.8, ..ArchConfig::default() };
    check(arch, Dims::new(8, 12, 3), 11);
}

#[test]
fn parameter_count_follows_the_table() {
    let arch = ArchConfig { stages: 1, widths: vec![2], bottleneck_width: 2, ..ArchConfig::default() };
    let net = DipNetwork::new(arch, Dims::new(8, 8, 4), 1.0, 0).unwrap();
    // enc conv 4->2, down 2->2, mid 2->2, dec 4->2 (3x3), head 2->4 (1x1).
    let expected = (4 * 2 * 9 + 2) + (2 * 2 * 9 + 2) + (2 * 2 * 9 + 2) + (4 * 2 * 9 + 2) + (2 * 4 + 4);
    assert_eq!(net.n_params(), expected);
    let total: usize = net.tensor_table().iter().map(|t| t.shape.iter().product::<usize>()).sum();
    assert_eq!(total, expected);
}
