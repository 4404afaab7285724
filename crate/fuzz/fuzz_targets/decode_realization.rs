#![no_main]
use jumptraj::poisson::PoissonRealization;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(r) = PoissonRealization::from_bytes(data) {
        assert_eq!(PoissonRealization::from_bytes(&r.to_bytes()).unwrap(), r);
    }
});
