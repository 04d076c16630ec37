//! Splits one attention call into chunks, merges the partial states and
//! checks the result against a single pass.

use prefix_attn::attention::max_rel_err;
use prefix_attn::tensor::Tensor3;
use prefix_attn::{empty_partial, finalize, pac, por};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut normal = |rows, heads, d| Tensor3::<f64>::from_fn(rows, heads, d, || StandardNormal.sample(&mut rng));
    // Four query heads over two KV heads.
    let (n, h_q, h_kv, d) = (96, 4, 2, 16);
    let q = normal(1, h_q, d);
    let k = normal(n, h_kv, d);
    let v = normal(n, h_kv, d);

    let whole = pac(q.view(), k.view(), v.view(), &[n]).unwrap();

    let mut merged = empty_partial(1, h_q, d);
    for (a, b) in [(0, 40), (40, 41), (41, 96)] {
        let chunk = pac(q.view(), k.view().slice_rows(a, b), v.view().slice_rows(a, b), &[b - a]).unwrap();
        println!(
            "chunk {a:>2}..{b:<2} head 0: max {:+.4}, exp sum {:.4}",
            chunk.max_score(0, 0),
            chunk.exp_sum(0, 0)
        );
        merged = por(&merged, &chunk).unwrap();
    }

    let err = max_rel_err(merged.out_slice(), whole.out_slice(), d);
    println!("merged vs single pass: max relative error {err:.2e}");
    assert!(err < 1e-12);

    let out = finalize(&merged).unwrap();
    println!("head 0 output[..4] = {:?}", &out.out.as_slice()[..4]);
}
