use hparse_tensor::kernels::{bilinear_resize, bilinear_resize_backward, nearest_index};
use hparse_tensor::{Tape, Tensor};
use proptest::prelude::*;

fn tensor(shape: &'static [usize]) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    proptest::collection::vec(-5.0f64..5.0, n).prop_map(move |d| Tensor::new(shape, d))
}

proptest! {
    #[test]
    fn softmax_is_a_simplex_along_its_axis(x in tensor(&[2, 4, 3, 5]), axis in 1usize..4) {
        let mut t = Tape::new();
        let v = t.leaf(x.clone(), false);
        let s = t.softmax(v, axis);
        let y = t.value(s);
        let shape = x.shape();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let sum: f64 = (0..len).map(|k| y.data()[(o * len + k) * inner + i]).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }
        prop_assert!(y.data().iter().all(|&p| p > 0.0));
    }

    #[test]
    fn conv_is_linear_in_its_input(a in tensor(&[1, 2, 5, 5]), b in tensor(&[1, 2, 5, 5]), w in tensor(&[3, 2, 3, 3]), k in -2.0f64..2.0) {
        let mut t = Tape::new();
        let (va, vb, vw) = (t.leaf(a, false), t.leaf(b, false), t.leaf(w, false));
        let kb = t.scale(vb, k);
        let mixed = t.add(va, kb);
        let lhs = t.conv2d(mixed, vw, None, 1, 1);
        let ca = t.conv2d(va, vw, None, 1, 1);
        let cb = t.conv2d(vb, vw, None, 1, 1);
        let kcb = t.scale(cb, k);
        let rhs = t.add(ca, kcb);
        for (x, y) in t.value(lhs).data().iter().zip(t.value(rhs).data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn flipping_twice_is_identity(x in tensor(&[2, 3, 4, 5])) {
        let mut t = Tape::new();
        let v = t.leaf(x.clone(), false);
        let f = t.flip_w(v);
        let ff = t.flip_w(f);
        prop_assert_eq!(t.value(ff), &x);
        prop_assert_ne!(t.value(f), &x);
    }

    #[test]
    fn bilinear_backward_is_the_adjoint(
        in_h in 1usize..7, in_w in 1usize..7, out_h in 1usize..9, out_w in 1usize..9, seed in any::<u64>(),
    ) {
        let mut s = seed | 1;
        let mut next = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s % 2000) as f64 / 1000.0 - 1.0
        };
        let x: Vec<f64> = (0..in_h * in_w).map(|_| next()).collect();
        let y: Vec<f64> = (0..out_h * out_w).map(|_| next()).collect();
        let ax = bilinear_resize(&x, 1, in_h, in_w, out_h, out_w);
        let mut aty = vec![0.0; in_h * in_w];
        bilinear_resize_backward(&y, 1, in_h, in_w, out_h, out_w, &mut aty);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn nearest_index_is_monotone_and_in_range(in_len in 1usize..50, out_len in 1usize..50) {
        let idx = nearest_index(in_len, out_len);
        prop_assert_eq!(idx.len(), out_len);
        prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(idx.iter().all(|&i| i < in_len));
    }
}
