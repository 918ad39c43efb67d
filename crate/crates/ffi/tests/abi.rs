use std::ffi::CStr;
use std::process::Command;
use std::ptr;

use lmmsel_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(lmmsel_last_error()) }.to_string_lossy().into_owned()
}

/// Intercept, one real covariate and four noise columns; four groups of six.
fn toy() -> (usize, usize, Vec<f64>, Vec<f64>, Vec<u32>) {
    let n = 24;
    let p = 6;
    let mut x = vec![0.0; n * p];
    let mut y = vec![0.0; n];
    let mut g = vec![0u32; n];
    for i in 0..n {
        let t = i as f64;
        let cols = [
            1.0,
            (0.7 * t).sin(),
            (1.3 * t + 0.4).cos(),
            ((2.1 * t).sin() * 1.7).tanh(),
            (0.37 * t + 1.0).sin(),
            (2.9 * t).cos(),
        ];
        for (j, v) in cols.iter().enumerate() {
            x[j * n + i] = *v;
        }
        g[i] = (i / 6) as u32;
        let u = [0.8, -0.5, 0.3, -0.6][i / 6];
        y[i] = 1.0 + 2.0 * cols[1] + u + 0.1 * (5.3 * t).sin();
    }
    (n, p, y, x, g)
}

unsafe fn build() -> *mut LmmselData {
    let (n, p, y, x, g) = toy();
    let mut d = ptr::null_mut();
    assert_eq!(lmmsel_data_new(n, p, y.as_ptr(), x.as_ptr(), &mut d), LmmselStatus::Ok);
    let name = c"group";
    assert_eq!(lmmsel_data_add_effect(d, name.as_ptr(), g.as_ptr(), n, -1), LmmselStatus::Ok);
    d
}

#[test]
fn fit_round_trip() {
    unsafe {
        let d = build();
        let mut f = ptr::null_mut();
        let st = lmmsel_fit(d, 10.0, LmmselSelector::Lasso as i32, &mut f);
        assert_eq!(st, LmmselStatus::Ok, "{}", last_error());
        assert_eq!(last_error(), "");
        assert_eq!(lmmsel_fit_p(f), 6);
        assert_eq!(lmmsel_fit_q(f), 1);
        let mut beta = [0.0; 6];
        assert_eq!(lmmsel_fit_beta(f, beta.as_mut_ptr(), 6), LmmselStatus::Ok);
        assert!((beta[1] - 2.0).abs() < 0.3, "{beta:?}");
        let mut s2 = [f64::NAN; 1];
        assert_eq!(lmmsel_fit_sigma2(f, s2.as_mut_ptr(), 1), LmmselStatus::Ok);
        assert!(s2[0].is_finite() && s2[0] >= 0.0);
        assert!(lmmsel_fit_sigma2_e(f) > 0.0);
        assert!(lmmsel_fit_objective(f).is_finite());
        assert_eq!(lmmsel_fit_lambda(f), 10.0);
        assert!(lmmsel_fit_support_size(f) >= 2);
        assert!(lmmsel_fit_iterations(f) >= 1);
        lmmsel_fit_free(f);
        lmmsel_data_free(d);
    }
}

#[test]
fn tune_picks_a_fit() {
    unsafe {
        let d = build();
        let mut f = ptr::null_mut();
        let st = lmmsel_tune(d, 10, LmmselSelector::Lasso as i32, LmmselCriterion::Bic as i32, &mut f);
        assert_eq!(st, LmmselStatus::Ok, "{}", last_error());
        assert!(lmmsel_fit_lambda(f) > 0.0);
        lmmsel_fit_free(f);
        lmmsel_data_free(d);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut f = ptr::null_mut();
        assert_eq!(lmmsel_fit(ptr::null(), 1.0, 0, &mut f), LmmselStatus::NullPointer);
        assert!(!last_error().is_empty());

        let d = build();
        assert_eq!(lmmsel_fit(d, 1.0, 7, &mut f), LmmselStatus::InvalidArgument);
        assert!(last_error().contains("selector"));
        assert_eq!(lmmsel_fit(d, -1.0, 0, &mut f), LmmselStatus::InvalidArgument);
        assert_eq!(lmmsel_tune(d, 5, 0, 9, &mut f), LmmselStatus::InvalidArgument);

        let g = [0u32; 3];
        assert_eq!(lmmsel_data_add_effect(d, ptr::null(), g.as_ptr(), 3, -1), LmmselStatus::DataError);
        let g = [0u32; 24];
        assert_eq!(lmmsel_data_add_effect(d, ptr::null(), g.as_ptr(), 24, 99), LmmselStatus::InvalidArgument);

        assert_eq!(lmmsel_fit(d, 10.0, 0, &mut f), LmmselStatus::Ok);
        let mut small = [0.0; 2];
        assert_eq!(lmmsel_fit_beta(f, small.as_mut_ptr(), 2), LmmselStatus::BufferTooSmall);
        lmmsel_fit_free(f);
        lmmsel_data_free(d);

        assert_eq!(lmmsel_data_new(0, 1, ptr::null(), ptr::null(), &mut ptr::null_mut()), LmmselStatus::InvalidArgument);
        assert!(lmmsel_fit_sigma2_e(ptr::null()).is_nan());
        lmmsel_fit_free(ptr::null_mut());
        lmmsel_data_free(ptr::null_mut());
    }
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(lmmsel_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/lmmsel.h")).unwrap();
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    for line in src.lines() {
        if let Some(rest) = line.split("extern \"C\" fn ").nth(1) {
            let name = rest.split('(').next().unwrap();
            assert!(header.contains(&format!("{name}(")), "{name} missing from header");
        }
    }
    // Compile the header as C when a compiler is around.
    if let Ok(out) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", "-"])
        .arg(format!("-I{}", concat!(env!("CARGO_MANIFEST_DIR"), "/include")))
        .stdin(std::process::Stdio::piped())
        .output_with_stdin("#include \"lmmsel.h\"\nint main(void) { return lmmsel_version() == 0; }\n")
    {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}

trait OutputWithStdin {
    fn output_with_stdin(&mut self, input: &str) -> std::io::Result<std::process::Output>;
}

impl OutputWithStdin for Command {
    fn output_with_stdin(&mut self, input: &str) -> std::io::Result<std::process::Output> {
        use std::io::Write;
        let mut child = self.stdout(std::process::Stdio::piped()).stderr(std::process::Stdio::piped()).spawn()?;
        child.stdin.take().unwrap().write_all(input.as_bytes())?;
        child.wait_with_output()
    }
}
