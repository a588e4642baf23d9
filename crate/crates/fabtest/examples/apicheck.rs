use fabtest::special::{erfc, norm_cdf};
fn main() {
    println!("relerr phi(1)  = {:.3e}", (norm_cdf(1.0) - 0.8413447460685429486).abs() / 0.84);
    println!("relerr phi(-2) = {:.3e}", (norm_cdf(-2.0) - 2.2750131948179207200e-2).abs() / 2.3e-2);
    println!("relerr phi(-20)= {:.3e}", (norm_cdf(-20.0) - 2.753624e-89).abs() / 2.75e-89);
    println!("erfc(5) = {:.16e} (true 1.5374597944280348502e-12)", erfc(5.0));
    println!("erfc(-1) = {:.16e} (true 1.8427007929497148693)", erfc(-1.0));
}
