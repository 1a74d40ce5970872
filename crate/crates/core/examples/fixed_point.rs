//! Fixed-point formats, rounding and saturation, and the deterministic tree
//! matrix-vector product used by the fwl solver backend.

use rwm_mpc::fxp::{quantize, tree_matvec, FixedFormat, FixedMatrix, FixedVector, TreeSchedule};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let q = FixedFormat::new(27, 2)?;
    println!("format (27, 2): ulp {:e}, range [{}, {}]", q.ulp(), q.min_value(), q.max_value());
    for x in [0.1, -0.1, 1.0 / 3.0, 1.9999999999, 2.5, -7.0] {
        let v = quantize(x, q)?;
        println!("  {x:>14.10} -> raw {:>10}  value {:>14.10}  error {:+.3e}", v.raw(), v.to_f64(), v.to_f64() - x);
    }

    let h = [0.5, -0.25, 0.125, 0.25, 0.5, -0.125, 0.125, -0.125, 0.5];
    let x = [0.75, -1.5, 0.3];
    let hf = FixedFormat::covering(27, 0.5)?;
    let out = FixedFormat::new(27, 2)?;
    let hm = FixedMatrix::quantize(3, 3, &h, hf)?;
    let xv = FixedVector::quantize(&x, q)?;
    let sched = TreeSchedule::widening(hf, q, out, 35, 3)?;
    let y = tree_matvec(&hm, &xv, &sched)?;
    let exact: Vec<f64> = (0..3).map(|i| (0..3).map(|j| h[3 * i + j] * x[j]).sum()).collect();
    println!("H x in fixed point: {:?}", y.to_f64());
    println!("H x in f64:         {exact:?}");
    let again = tree_matvec(&hm, &xv, &sched)?;
    println!("repeat identical: {}", again.raw() == y.raw());
    Ok(())
}
