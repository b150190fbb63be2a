use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Independent oracle: squared singular values from nalgebra's symmetric eigensolver on MᵀM.
fn oracle_sq_singular_values(m: &Matrix) -> Vec<f64> {
    let dm = DMatrix::from_row_slice(m.rows, m.cols, &m.data);
    let gram = dm.transpose() * &dm;
    let mut ev: Vec<f64> = SymmetricEigen::new(gram).eigenvalues.iter().map(|&x| x.max(0.0)).collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ev
}

fn tiny_cfg(n_layers: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model: 2,
        n_heads: 1,
        n_kv_heads: 1,
        ffn_dim: 2,
        vocab: 4,
        max_seq: 4,
        rope_theta: 10_000.0,
    }
}

fn set(model: &mut Transformer<f64>, layer: usize, target: Target, values: &[f64]) {
    let name = format!("layers.{layer}.{}", target.name());
    let shape = model.params.get(&name).unwrap().shape().to_vec();
    *model.params.get_mut(&name).unwrap() = Tensor::from_f64(&shape, values).unwrap();
}

#[test]
fn split_spec_defaults() {
    let toy = SplitSpec::toy();
    toy.validate().unwrap();
    assert_eq!(toy.removed(), vec![2, 3, 5]);
    assert_eq!(toy.prelude + toy.coda + 1 + toy.removed().len(), toy.n_layers);

    let q = SplitSpec::qwen25_3b();
    q.validate().unwrap();
    assert_eq!(q.kept(), 17);
    assert_eq!(q.removed().len(), 19);
    assert_eq!(q.coda_start(), 28);
}

#[test]
fn split_spec_rejects_bad_layouts() {
    assert!(SplitSpec::new(8, 4, 4, 4).is_err());
    assert!(SplitSpec::new(8, 2, 1, 2).is_err());
    assert!(SplitSpec::new(8, 2, 6, 2).is_err());
    assert!(SplitSpec::new(8, 2, 5, 2).is_ok());
}

#[test]
fn average_residual_examples() {
    let cfg = tiny_cfg(5);
    let spec = SplitSpec::new(5, 1, 1, 1).unwrap();
    assert_eq!(spec.removed(), vec![2, 3]);
    let mut model = Transformer::<f64>::init(cfg.clone(), 0).unwrap();
    let w_r = [0.5, -1.0, 2.0, 0.25];
    for l in 0..5 {
        set(&mut model, l, Target::Q, &w_r);
    }
    let d = average_residual(&model, &spec, Target::Q).unwrap();
    assert!(d.data.iter().all(|&x| x == 0.0));

    let m = [1.0, 2.0, -3.0, 0.5];
    set(&mut model, 2, Target::Q, &[w_r[0] + m[0], w_r[1] + m[1], w_r[2] + m[2], w_r[3] + m[3]]);
    set(&mut model, 3, Target::Q, &[w_r[0] - m[0], w_r[1] - m[1], w_r[2] - m[2], w_r[3] - m[3]]);
    let d = average_residual(&model, &spec, Target::Q).unwrap();
    assert!(d.data.iter().all(|&x| x.abs() < 1e-15));

    set(&mut model, 1, Target::Q, &[0.0; 4]);
    set(&mut model, 2, Target::Q, &[2.0, 0.0, 0.0, 0.0]);
    set(&mut model, 3, Target::Q, &[0.0, 0.0, 0.0, 4.0]);
    let d = average_residual(&model, &spec, Target::Q).unwrap();
    assert_eq!(d.data, vec![1.0, 0.0, 0.0, 2.0]);
}

#[test]
fn average_residual_needs_removed_layers() {
    let model = Transformer::<f64>::init(tiny_cfg(3), 0).unwrap();
    let spec = SplitSpec::new(3, 1, 1, 1).unwrap();
    assert!(matches!(
        average_residual(&model, &spec, Target::Q),
        Err(Error::Config(_))
    ));
}

#[test]
fn svd_of_diagonal() {
    let m = Matrix::from_vec(2, 2, vec![2.0, 0.0, 0.0, 1.0]).unwrap();
    let svd = truncated_svd(&m, 1).unwrap();
    assert!((svd.s[0] - 2.0).abs() < 1e-15);
    let rec = svd.reconstruct();
    let want = [2.0, 0.0, 0.0, 0.0];
    for (a, b) in rec.data.iter().zip(want) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn svd_of_zero_matrix() {
    let m = Matrix::zeros(3, 4);
    let svd = truncated_svd(&m, 2).unwrap();
    assert_eq!(svd.s, vec![0.0, 0.0]);
    assert!(svd.reconstruct().data.iter().all(|&x| x == 0.0));
    // Factors still have orthonormal columns.
    for f in [&svd.u, &svd.v] {
        let g = f.transpose().matmul(f);
        for i in 0..2 {
            for j in 0..2 {
                assert!((g.at(i, j) - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn svd_rank_out_of_range() {
    let m = Matrix::zeros(3, 4);
    assert!(matches!(truncated_svd(&m, 0), Err(Error::Config(_))));
    assert!(matches!(truncated_svd(&m, 4), Err(Error::Config(_))));
}

#[test]
fn svd_tail_energy_matches_gram_eigen_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(86);
    let m = random_matrix(8, 6, &mut rng);
    let svd = truncated_svd(&m, 3).unwrap();
    let err_sq = m.sub(&svd.reconstruct()).frobenius().powi(2);
    let ev = oracle_sq_singular_values(&m);
    let tail: f64 = ev[3..].iter().sum();
    assert!((err_sq - tail).abs() < 1e-8, "{err_sq} vs {tail}");
    for (s, e) in svd.s.iter().zip(&ev) {
        assert!((s * s - e).abs() < 1e-8);
    }
}

#[test]
fn wide_matrices_use_the_other_gram() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = random_matrix(4, 9, &mut rng);
    let svd = truncated_svd(&m, 4).unwrap();
    assert!(m.sub(&svd.reconstruct()).frobenius() < 1e-10);
    assert_eq!((svd.u.rows, svd.v.rows), (4, 9));
}

#[test]
fn sign_convention_is_canonical() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let m = random_matrix(7, 5, &mut rng);
    let a = truncated_svd(&m, 3).unwrap();
    let b = truncated_svd(&m, 3).unwrap();
    assert_eq!(a.u, b.u);
    assert_eq!(a.v, b.v);
    for j in 0..3 {
        let first = (0..5).map(|k| a.v.at(k, j)).find(|x| x.abs() > 1e-12).unwrap();
        assert!(first > 0.0);
    }
}

#[test]
fn eckart_young_beats_random_competitors() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for r in 1..=3 {
        let m = random_matrix(10, 8, &mut rng);
        let best = m.sub(&truncated_svd(&m, r).unwrap().reconstruct()).frobenius();
        for _ in 0..100 {
            let x = random_matrix(10, r, &mut rng).matmul(&random_matrix(r, 8, &mut rng));
            assert!(best <= m.sub(&x).frobenius());
        }
    }
}

#[test]
fn jacobi_diagonalizes_symmetric_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_matrix(6, 6, &mut rng);
    let a = x.transpose().matmul(&x);
    let (vals, vecs) = jacobi_eigen(&a).unwrap();
    // A V = V Λ
    let av = a.matmul(&vecs);
    for j in 0..6 {
        for i in 0..6 {
            assert!((av.at(i, j) - vecs.at(i, j) * vals[j]).abs() < 1e-10);
        }
    }
}

#[test]
fn identical_layers_give_zero_bases_and_full_rank_reconstructs() {
    let cfg = ModelConfig {
        n_layers: 5,
        d_model: 4,
        n_heads: 2,
        n_kv_heads: 1,
        ffn_dim: 6,
        vocab: 8,
        max_seq: 4,
        rope_theta: 10_000.0,
    };
    let spec = SplitSpec::new(5, 1, 2, 1).unwrap();
    let mut model = Transformer::<f64>::init(cfg.clone(), 1).unwrap();
    let same = model.clone();
    for l in 0..5 {
        for t in Target::ALL {
            let src = same.params.get(&format!("layers.2.{}", t.name())).unwrap().clone();
            *model.params.get_mut(&format!("layers.{l}.{}", t.name())).unwrap() = src;
        }
    }
    let bases = build_bases(&model, &spec, 2, 16.0).unwrap();
    for (_, b) in &bases.targets {
        assert!(b.a.data().iter().chain(b.b.data()).all(|&x| x == 0.0) || b.b.data().iter().all(|&x| x == 0.0));
        assert_eq!(b.tail_energy, 0.0);
    }

    // q is 4×4: full rank reproduces Δ̄.
    let bases = build_bases(&same, &spec, 4, 16.0).unwrap();
    let delta = average_residual(&same, &spec, Target::Q).unwrap();
    let q = bases.get(Target::Q);
    let b = Matrix::from_vec(4, 4, q.b.data().to_vec()).unwrap();
    let a = Matrix::from_vec(4, 4, q.a.data().to_vec()).unwrap();
    assert!(delta.sub(&b.matmul(&a)).frobenius() < 1e-6);
}

#[test]
fn oversized_rank_is_zero_padded() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let delta = random_matrix(3, 5, &mut rng);
    let basis: TargetBasis<f64> = factorize(&delta, 4).unwrap();
    assert_eq!(basis.effective_rank, 3);
    assert_eq!(basis.a.shape(), &[4, 5]);
    assert_eq!(basis.b.shape(), &[3, 4]);
    assert!(basis.a.data()[15..].iter().all(|&x| x == 0.0));
    assert!(basis.tail_energy < 1e-10);
}

#[test]
fn paper_scaling_constant() {
    let set = LoraBasisSet::<f32> {
        rank: 32,
        alpha: 16.0,
        targets: vec![],
    };
    assert_eq!(set.scaling(), 0.5);
}

#[test]
fn convert_freezes_everything_and_names_layers() {
    let cfg = ModelConfig::toy();
    let base = Transformer::<f32>::init(cfg.clone(), 0).unwrap();
    let sc = SurgeryConfig {
        split: SplitSpec::toy(),
        rank: 8,
        alpha: 16.0,
    };
    let (conv, bases) = convert(&base, &sc).unwrap();
    assert!(conv.params.iter().all(|(_, p)| p.frozen));
    assert_eq!(conv.params.get("recurrent.q").unwrap(), base.params.get("layers.4.q").unwrap());
    assert_eq!(conv.params.get("coda.1.down").unwrap(), base.params.get("layers.7.down").unwrap());
    assert_eq!(conv.params.get("prelude.1.up").unwrap(), base.params.get("layers.1.up").unwrap());
    assert!(!conv.params.contains("prelude.2.q"));
    assert_eq!(conv.params.get("lora.k.A").unwrap().shape(), &[8, 64]);
    assert_eq!(conv.params.get("lora.k.B").unwrap().shape(), &[32, 8]);
    let text = manifest(&sc, &bases);
    assert!(text.contains("removed=2,3,5"));
    assert!(text.contains("scaling=2"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn svd_factors_are_orthonormal_and_optimal(rows in 1usize..10, cols in 1usize..10, seed in 0u64..1000, r_frac in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_matrix(rows, cols, &mut rng);
        let r = 1 + ((rows.min(cols) - 1) as f64 * r_frac) as usize;
        let svd = truncated_svd(&m, r).unwrap();
        for w in svd.s.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
        for f in [&svd.u, &svd.v] {
            let g = f.transpose().matmul(f);
            for i in 0..r {
                for j in 0..r {
                    let want = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((g.at(i, j) - want).abs() < 1e-8);
                }
            }
        }
        let err_sq = m.sub(&svd.reconstruct()).frobenius().powi(2);
        let tail: f64 = oracle_sq_singular_values(&m).iter().skip(r).sum();
        prop_assert!((err_sq - tail).abs() < 1e-8);
    }
}
