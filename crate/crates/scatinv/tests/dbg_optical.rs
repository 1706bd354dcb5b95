#[test]
fn dbg_marchenko2_roundtrip() {
    use num_complex::Complex64;
    use scatinv::interp::CubicSpline;
    use scatinv::smatrix;
    let q_max = 3.0;
    let toy = |r: f64| {
        nalgebra::Matrix2::new(
            Complex64::new(-1.2 * (-r).exp(), 0.0),
            Complex64::new(-0.6 * r * r / (1.0 + r * r) * (-1.3_f64 * r).exp(), 0.0),
            Complex64::new(-0.6 * r * r / (1.0 + r * r) * (-1.3_f64 * r).exp(), 0.0),
            Complex64::new(-1.0 * (-r).exp(), 0.0),
        )
    };
    let mut qs = Vec::new();
    let (mut d1, mut d2, mut ep) = (Vec::new(), Vec::new(), Vec::new());
    let mut prev = None;
    for i in 1..=60 {
        let q = q_max * i as f64 / 60.0;
        let t = scatinv::forward::phase_eq_coupled(&toy, 25.0, q, 0, 2).unwrap().terminal;
        let s = smatrix::s_from_bb(t.delta1, t.delta2, t.epsilon);
        let (b1, b2, be) = smatrix::stapp_from_s(&s, prev);
        prev = Some((b1, b2, be));
        qs.push(q);
        d1.push(b1.re);
        d2.push(b2.re);
        ep.push(be.re);
    }
    let c1 = CubicSpline::natural(qs.clone(), d1);
    let c2 = CubicSpline::natural(qs.clone(), d2);
    let cee = CubicSpline::natural(qs, ep);
    let s = smatrix::fit_pade_coupled(&|q| c1.eval(q), &|q| c2.eval(q), &|q| cee.eval(q), q_max, (6, 6, 6), 0, 2).unwrap();
    let spec = smatrix::spectral_decompose_coupled(&s, &[], q_max).unwrap();
    let grid: Vec<f64> = (1..=800).map(|k| 0.01 + (16.0 - 0.01) * k as f64 / 800.0).collect();
    let sol = scatinv::marchenko2::solve_coupled_kernel(&spec, &grid).unwrap();
    let v = scatinv::marchenko2::extract_coupled_potential(&sol).unwrap();
    // Large-r behavior of v22: power-law tail?
    for i in [99usize, 199, 299, 399, 499, 599, 699, 789] {
        println!(
            "r={:.3} v11={:+.4e} v22={:+.4e} v12={:+.4e} r^2*v22={:+.4e} r^3*v22={:+.4e}",
            grid[i], v.v11[i].re, v.v22[i].re, v.v12[i].re,
            grid[i].powi(2) * v.v22[i].re, grid[i].powi(3) * v.v22[i].re
        );
    }
    let vf = |r: f64| v.eval(r);
    let mut prev = None;
    let mut prev_fit = None;
    for i in 1..=9 {
        let q = 0.3 + (q_max - 0.4) * (i - 1) as f64 / 8.0;
        let sm = scatinv::forward::direct_s_matrix(&vf, grid[0], 16.0, q, 0, 2).unwrap();
        let (b1, b2, be) = smatrix::stapp_from_s(&sm, prev);
        prev = Some((b1, b2, be));
        let sf = s.eval(Complex64::new(q, 0.0));
        let (f1, f2, fe) = smatrix::stapp_from_s(&sf, prev_fit);
        prev_fit = Some((f1, f2, fe));
        println!(
            "q={q:.3} d1: rec={:+.5} fit={:+.5} cur={:+.5} | d2: rec={:+.5} fit={:+.5} cur={:+.5} | ep: rec={:+.5} fit={:+.5} cur={:+.5}",
            b1.re, f1.re, c1.eval(q),
            b2.re, f2.re, c2.eval(q),
            be.re, fe.re, cee.eval(q)
        );
    }
}

#[test]
fn dbg_single_l2() {
    use num_complex::Complex64;
    use scatinv::{forward, marchenko1, smatrix};
    let v0 = |r: f64| Complex64::new(-1.0 * (-r).exp(), 0.0);
    let l = 2;
    let curve = move |q: f64| forward::phase_eq_single(&v0, 30.0, q, l).unwrap().terminal.re;
    let q_max = 3.0;
    let s = smatrix::fit_pade_single(&curve, q_max, 6, l).unwrap();
    let spec = smatrix::spectral_decompose(&s, &[], q_max).unwrap();
    let grid: Vec<f64> = (1..=800).map(|k| 0.01 + (16.0 - 0.01) * k as f64 / 800.0).collect();
    let v = marchenko1::extract_potential(&marchenko1::solve_output_kernel(&spec, &grid).unwrap());
    for i in [0usize, 4, 9, 24, 49, 99, 199] {
        println!("r={:.3} v={:+.4e} r^2 v={:+.4e}", grid[i], v.values[i].re, grid[i].powi(2) * v.values[i].re);
    }
    let vf = |r: f64| v.eval(r);
    for i in 0..9 {
        let q = 0.3 + (q_max - 0.4) * i as f64 / 8.0;
        let rec = forward::phase_eq_single(&vf, 16.0, q, l).unwrap().terminal.re;
        let rec2 = forward::direct_scatter(&vf, 16.0, q, l).unwrap().re;
        // Fit phase from the rational model.
        let fit = {
            let sv = s.eval(Complex64::new(q, 0.0));
            0.5 * sv.ln().im
        };
        println!("q={q:.3} rec={rec:+.5} rec_direct={rec2:+.5} fit={fit:+.5} cur={:+.5}", curve(q));
    }
}

#[test]
fn dbg_fit_l2_nodes() {
    use num_complex::Complex64;
    use scatinv::{forward, smatrix};
    let v0 = |r: f64| Complex64::new(-1.0 * (-r).exp(), 0.0);
    let l = 2;
    let curve = move |q: f64| forward::phase_eq_single(&v0, 30.0, q, l).unwrap().terminal.re;
    for n in [6usize, 8, 10, 12] {
        match smatrix::fit_pade_single(&curve, 3.0, n, l) {
            Ok(s) => {
                let mut worst = 0.0f64;
                for i in 1..=30 {
                    let q = 3.0 * i as f64 / 30.0;
                    let fit = 0.5 * s.eval(Complex64::new(q, 0.0)).ln().im;
                    worst = worst.max((fit - curve(q)).abs());
                }
                println!("n={n}: ok, worst dev {worst:.3e}");
            }
            Err(e) => println!("n={n}: ERR {e}"),
        }
    }
}

#[test]
fn dbg_fit_matrix() {
    use num_complex::Complex64;
    use scatinv::{forward, smatrix};
    use nalgebra::{DMatrix, DVector};
    let v0 = |r: f64| Complex64::new(-1.0 * (-r).exp(), 0.0);
    let l = 2;
    let curve = move |q: f64| forward::phase_eq_single(&v0, 30.0, q, l).unwrap().terminal.re;
    let q_max = 3.0;
    for n in [6usize, 8] {
        let lead = 2usize;
        let nodes = smatrix::chebyshev_nodes(n, q_max);
        let na = (n - lead) / 2;
        let nb = n - na;
        let m = na + nb;
        let mut mat = DMatrix::<f64>::zeros(n, m);
        let mut rhs = DVector::<f64>::zeros(n);
        for (i, &q) in nodes.iter().enumerate() {
            let (sp, cp) = curve(q).sin_cos();
            let t = q / q_max;
            for k in 0..na {
                mat[(i, k)] = t.powi(2 * (k + lead) as i32 + 1) * cp;
            }
            for k in 0..nb {
                mat[(i, na + k)] = t.powi(2 * k as i32 + 2) * sp;
            }
            rhs[i] = -sp;
        }
        for c in 0..m {
            let s = mat.column(c).norm();
            for r in 0..n {
                mat[(r, c)] /= s;
            }
        }
        let svd = mat.clone().svd(true, true);
        let mut sv: Vec<f64> = svd.singular_values.iter().cloned().collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        println!("n={n} na={na} nb={nb} sv = {:?}", sv);
        let sol = svd.solve(&rhs, 1e-12 * sv[0]).unwrap();
        let resid = (&mat * &sol - &rhs).amax();
        println!("n={n} resid={resid:.3e}");
    }
}

#[test]
fn dbg_coupled_fit_poles() {
    use num_complex::Complex64;
    use scatinv::{forward, smatrix};
    use scatinv::interp::CubicSpline;
    let q_max = 3.0;
    let toy = |r: f64| {
        nalgebra::Matrix2::new(
            Complex64::new(-1.2 * (-r).exp(), 0.0),
            Complex64::new(-0.6 * r * r / (1.0 + r * r) * (-1.3_f64 * r).exp(), 0.0),
            Complex64::new(-0.6 * r * r / (1.0 + r * r) * (-1.3_f64 * r).exp(), 0.0),
            Complex64::new(-1.0 * (-r).exp(), 0.0),
        )
    };
    let mut qs = Vec::new();
    let (mut d1, mut d2, mut ep) = (Vec::new(), Vec::new(), Vec::new());
    let mut prev = None;
    for i in 1..=60 {
        let q = q_max * i as f64 / 60.0;
        let t = forward::phase_eq_coupled(&toy, 25.0, q, 0, 2).unwrap().terminal;
        let s = smatrix::s_from_bb(t.delta1, t.delta2, t.epsilon);
        let (b1, b2, be) = smatrix::stapp_from_s(&s, prev);
        prev = Some((b1, b2, be));
        qs.push(q);
        d1.push(b1.re);
        d2.push(b2.re);
        ep.push(be.re);
    }
    let c1 = CubicSpline::natural(qs.clone(), d1);
    let c2 = CubicSpline::natural(qs.clone(), d2);
    let cee = CubicSpline::natural(qs, ep);
    for n in [(6usize, 6usize, 6usize), (6, 6, 8), (6, 6, 10), (6, 6, 12), (6, 6, 2), (8, 6, 8), (8, 6, 6)] {
        match smatrix::fit_pade_coupled(&|q| c1.eval(q), &|q| c2.eval(q), &|q| cee.eval(q), q_max, n, 0, 2) {
            Ok(s) => {
                let min_im: Vec<f64> = s
                    .denominators()
                    .iter()
                    .map(|d| {
                        smatrix::poly_roots(d)
                            .unwrap()
                            .iter()
                            .map(|z| z.im.abs())
                            .fold(f64::INFINITY, f64::min)
                    })
                    .collect();
                let mut worst = [0.0f64; 3];
                let mut pf = None;
                for i in 1..=30 {
                    let q = 3.0 * i as f64 / 30.0;
                    let sv = s.eval(Complex64::new(q, 0.0));
                    let (f1, f2, fe) = smatrix::stapp_from_s(&sv, pf);
                    pf = Some((f1, f2, fe));
                    worst[0] = worst[0].max((f1.re - c1.eval(q)).abs());
                    worst[1] = worst[1].max((f2.re - c2.eval(q)).abs());
                    worst[2] = worst[2].max((fe.re - cee.eval(q)).abs());
                }
                println!("n={n:?}: ok, min|Im root| per block {min_im:?}, worst dev {worst:?}");
            }
            Err(e) => println!("n={n:?}: ERR {e}"),
        }
    }
}

#[test]
fn dbg_tensor_strength() {
    use num_complex::Complex64;
    use scatinv::{forward, smatrix};
    use scatinv::interp::CubicSpline;
    let q_max = 3.0;
    for vt in [0.6f64, 1.0, 1.5, 2.0] {
        let toy = move |r: f64| {
            let t = -vt * r * r / (1.0 + r * r) * (-1.3_f64 * r).exp();
            nalgebra::Matrix2::new(
                Complex64::new(-1.2 * (-r).exp(), 0.0),
                Complex64::new(t, 0.0),
                Complex64::new(t, 0.0),
                Complex64::new(-1.0 * (-r).exp(), 0.0),
            )
        };
        let mut qs = Vec::new();
        let (mut d1, mut d2, mut ep) = (Vec::new(), Vec::new(), Vec::new());
        let mut prev = None;
        for i in 1..=60 {
            let q = q_max * i as f64 / 60.0;
            let t = forward::phase_eq_coupled(&toy, 25.0, q, 0, 2).unwrap().terminal;
            let s = smatrix::s_from_bb(t.delta1, t.delta2, t.epsilon);
            let (b1, b2, be) = smatrix::stapp_from_s(&s, prev);
            prev = Some((b1, b2, be));
            qs.push(q);
            d1.push(b1.re);
            d2.push(b2.re);
            ep.push(be.re);
        }
        let epmax = ep.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
        let c1 = CubicSpline::natural(qs.clone(), d1);
        let c2 = CubicSpline::natural(qs.clone(), d2);
        let cee = CubicSpline::natural(qs, ep);
        match smatrix::fit_pade_coupled(&|q| c1.eval(q), &|q| c2.eval(q), &|q| cee.eval(q), q_max, (6, 6, 6), 0, 2) {
            Ok(s) => {
                let roots: Vec<Vec<Complex64>> = s.denominators().iter().map(|d| smatrix::poly_roots(d).unwrap()).collect();
                let min_im: Vec<f64> = roots.iter().map(|rs| rs.iter().map(|z| z.im.abs()).fold(f64::INFINITY, f64::min)).collect();
                let mut worst = [0.0f64; 3];
                let mut pf = None;
                for i in 3..=30 {
                    let q = 3.0 * i as f64 / 30.0;
                    let sv = s.eval(Complex64::new(q, 0.0));
                    let (f1, f2, fe) = smatrix::stapp_from_s(&sv, pf);
                    pf = Some((f1, f2, fe));
                    worst[0] = worst[0].max((f1.re - c1.eval(q)).abs());
                    worst[1] = worst[1].max((f2.re - c2.eval(q)).abs());
                    worst[2] = worst[2].max((fe.re - cee.eval(q)).abs());
                }
                println!("vt={vt}: epmax={epmax:.4} min|Im| {min_im:?} dev {worst:?}");
                println!("  mix roots: {:?}", roots[2]);
            }
            Err(e) => println!("vt={vt}: epmax={epmax:.4} ERR {e}"),
        }
    }
}

#[test]
fn dbg_eps_threshold() {
    use num_complex::Complex64;
    use scatinv::{forward, smatrix};
    let toy = |r: f64| {
        let t = -0.6 * r * r / (1.0 + r * r) * (-1.3_f64 * r).exp();
        nalgebra::Matrix2::new(
            Complex64::new(-1.2 * (-r).exp(), 0.0),
            Complex64::new(t, 0.0),
            Complex64::new(t, 0.0),
            Complex64::new(-1.0 * (-r).exp(), 0.0),
        )
    };
    for q in [0.05f64, 0.1, 0.2, 0.4] {
        let t = forward::phase_eq_coupled(&toy, 25.0, q, 0, 2).unwrap().terminal;
        let s = smatrix::s_from_bb(t.delta1, t.delta2, t.epsilon);
        let (b1, b2, be) = smatrix::stapp_from_s(&s, None);
        println!(
            "q={q}: bb_eps={:+.3e} bb_eps/q^2={:+.3e} bar_eps={:+.3e} bar/q={:+.3e} bar/q^3={:+.3e} d1={:+.3e} d2={:+.3e} d2/q^5={:+.3e}",
            t.epsilon.re, t.epsilon.re / (q * q), be.re, be.re / q, be.re / (q * q * q),
            b1.re, b2.re, b2.re / q.powi(5)
        );
    }
}

#[test]
fn dbg_qmax_scan() {
    use num_complex::Complex64;
    use scatinv::{forward, smatrix};
    use scatinv::interp::CubicSpline;
    let toy = |r: f64| {
        let t = -0.6 * r * r / (1.0 + r * r) * (-1.3_f64 * r).exp();
        nalgebra::Matrix2::new(
            Complex64::new(-1.2 * (-r).exp(), 0.0),
            Complex64::new(t, 0.0),
            Complex64::new(t, 0.0),
            Complex64::new(-1.0 * (-r).exp(), 0.0),
        )
    };
    for q_max in [3.0f64, 4.0, 5.0, 6.0] {
        let mut qs = Vec::new();
        let (mut d1, mut d2, mut ep) = (Vec::new(), Vec::new(), Vec::new());
        let mut prev = None;
        let n_pts = (q_max * 20.0) as usize;
        for i in 1..=n_pts {
            let q = q_max * i as f64 / n_pts as f64;
            let t = forward::phase_eq_coupled(&toy, 25.0, q, 0, 2).unwrap().terminal;
            let s = smatrix::s_from_bb(t.delta1, t.delta2, t.epsilon);
            let (b1, b2, be) = smatrix::stapp_from_s(&s, prev);
            prev = Some((b1, b2, be));
            qs.push(q);
            d1.push(b1.re);
            d2.push(b2.re);
            ep.push(be.re);
        }
        let c1 = CubicSpline::natural(qs.clone(), d1);
        let c2 = CubicSpline::natural(qs.clone(), d2);
        let cee = CubicSpline::natural(qs, ep);
        match smatrix::fit_pade_coupled(&|q| c1.eval(q), &|q| c2.eval(q), &|q| cee.eval(q), q_max, (6, 6, 6), 0, 2) {
            Ok(s) => {
                let min_im: Vec<f64> = s
                    .denominators()
                    .iter()
                    .map(|d| smatrix::poly_roots(d).unwrap().iter().map(|z| z.im.abs()).fold(f64::INFINITY, f64::min))
                    .collect();
                let mut worst = [0.0f64; 3];
                let mut pf = None;
                for i in 2..=30 {
                    let q = q_max * i as f64 / 30.0;
                    let sv = s.eval(Complex64::new(q, 0.0));
                    let (f1, f2, fe) = smatrix::stapp_from_s(&sv, pf);
                    pf = Some((f1, f2, fe));
                    worst[0] = worst[0].max((f1.re - c1.eval(q)).abs());
                    worst[1] = worst[1].max((f2.re - c2.eval(q)).abs());
                    worst[2] = worst[2].max((fe.re - cee.eval(q)).abs());
                }
                println!("q_max={q_max}: min|Im| {min_im:?} dev {worst:?}");
            }
            Err(e) => println!("q_max={q_max}: ERR {e}"),
        }
    }
}

#[test]
fn dbg_qmax4_spec() {
    use num_complex::Complex64;
    use scatinv::{forward, smatrix, marchenko2};
    use scatinv::interp::CubicSpline;
    let q_max = 4.0;
    let toy = |r: f64| {
        let t = -0.6 * r * r / (1.0 + r * r) * (-1.3_f64 * r).exp();
        nalgebra::Matrix2::new(
            Complex64::new(-1.2 * (-r).exp(), 0.0),
            Complex64::new(t, 0.0),
            Complex64::new(t, 0.0),
            Complex64::new(-1.0 * (-r).exp(), 0.0),
        )
    };
    let mut qs = Vec::new();
    let (mut d1, mut d2, mut ep) = (Vec::new(), Vec::new(), Vec::new());
    let mut prev = None;
    for i in 1..=60 {
        let q = q_max * i as f64 / 60.0;
        let t = forward::phase_eq_coupled(&toy, 25.0, q, 0, 2).unwrap().terminal;
        let s = smatrix::s_from_bb(t.delta1, t.delta2, t.epsilon);
        let (b1, b2, be) = smatrix::stapp_from_s(&s, prev);
        prev = Some((b1, b2, be));
        qs.push(q);
        d1.push(b1.re);
        d2.push(b2.re);
        ep.push(be.re);
    }
    let c1 = CubicSpline::natural(qs.clone(), d1);
    let c2 = CubicSpline::natural(qs.clone(), d2);
    let cee = CubicSpline::natural(qs, ep);
    let s = smatrix::fit_pade_coupled(&|q| c1.eval(q), &|q| c2.eval(q), &|q| cee.eval(q), q_max, (6, 6, 6), 0, 2).unwrap();
    let spec = smatrix::spectral_decompose_coupled(&s, &[], q_max).unwrap();
    println!("n poles = {}", spec.poles.len());
    for p in &spec.poles {
        println!(
            "beta={:+.4}{:+.4}i order={} |q1|={:.3e} q1 asym={:.3e} |q2|={:.3e}",
            p.beta.re, p.beta.im, p.order, p.q1.norm(),
            (p.q1[(0, 1)] - p.q1[(1, 0)]).norm(), p.q2.norm()
        );
    }
    // Kernel symmetry probe.
    for (x, y) in [(0.5, 1.0), (1.5, 0.7), (2.5, 2.5)] {
        let f = marchenko2::assemble_coupled_kernel(&spec, x, y).unwrap();
        let ft = marchenko2::assemble_coupled_kernel(&spec, y, x).unwrap().transpose();
        println!("F({x},{y}) asym {:.3e} scale {:.3e} im {:.3e}", (f - ft).norm(), f.norm(), f.iter().map(|z| z.im.abs()).fold(0.0f64, f64::max));
    }
}
