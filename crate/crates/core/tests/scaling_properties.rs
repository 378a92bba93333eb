use npunas::scale::{scale_depth, scale_resolution, scale_width};
use proptest::prelude::*;

proptest! {
    #[test]
    fn depth_never_shrinks_and_stays_within_half_a_layer(depth in 1usize..64, coef in 1.0f64..3.0) {
        let scaled = scale_depth(depth, coef);
        let exact = depth as f64 * coef;
        prop_assert!(scaled >= depth);
        prop_assert!((scaled as f64 - exact).abs() <= 0.5 + 1e-9);
    }

    #[test]
    fn width_is_a_covering_multiple_of_sixteen(width in 1usize..1024, coef in 1.01f64..3.0) {
        let scaled = scale_width(width, coef);
        prop_assert_eq!(scaled % 16, 0);
        prop_assert!(scaled as f64 >= width as f64 * coef - 1e-6);
        prop_assert!((scaled as f64) < width as f64 * coef + 16.0);
    }

    #[test]
    fn resolution_is_a_positive_multiple_of_the_stride(
        resolution in 8usize..512,
        coef in 1.01f64..2.0,
        log_stride in 0u32..6,
    ) {
        let stride = 1usize << log_stride;
        let scaled = scale_resolution(resolution, coef, stride);
        prop_assert!(scaled >= stride);
        prop_assert_eq!(scaled % stride, 0);
        let exact = resolution as f64 * coef;
        if exact >= stride as f64 / 2.0 {
            prop_assert!((scaled as f64 - exact).abs() <= stride as f64 / 2.0 + 1e-6);
        }
    }

    #[test]
    fn unit_coefficient_is_the_identity(depth in 1usize..64, width in 1usize..1024, resolution in 1usize..512) {
        prop_assert_eq!(scale_depth(depth, 1.0), depth);
        prop_assert_eq!(scale_width(width, 1.0), width);
        prop_assert_eq!(scale_resolution(resolution, 1.0, 32), resolution);
    }
}
