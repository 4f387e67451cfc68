mod common;

use common::{check_op, op_names, REL_TOL};

#[test]
fn every_primitive_matches_finite_differences() {
    let mut failed = Vec::new();
    for (i, op) in op_names().into_iter().enumerate() {
        let r = check_op(op, 100 + i as u64).unwrap();
        if r.max_rel_err >= REL_TOL {
            failed.push(format!("{}: {:e}", r.op, r.max_rel_err));
        }
    }
    assert!(failed.is_empty(), "{failed:?}");
}

#[test]
fn matmul_chain_into_mean() {
    use plastinet::{Graph, Tensor};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let c = common::Case {
        inputs: vec![Tensor::uniform(&[3, 4], 1.0, &mut rng), Tensor::uniform(&[4, 2], 1.0, &mut rng)],
        build: Box::new(|g: &mut Graph, v| {
            let y = g.matmul(v[0], v[1])?;
            Ok(g.mean(y))
        }),
    };
    assert!(common::check_case(&c, &mut rng).unwrap() < REL_TOL);
}
