//! Monte Carlo checks of the step-size mismatch probabilities, the temporal
//! accumulation law and the floor-versus-round gap.

use bitsnn::theory::{claims_to_csv, verify_all};

fn main() -> bitsnn::Result<()> {
    let n = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200_000);
    let claims = verify_all(n, 0)?;
    print!("{}", claims_to_csv(&claims));
    let failed = claims.iter().filter(|c| !c.pass).count();
    println!("{} claims, {failed} failed at n = {n}", claims.len());
    Ok(())
}
