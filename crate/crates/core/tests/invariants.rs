use lion_core::data::{parse_bbox, serialize_bbox, BBox, Tokenizer};
use lion_core::eval::iou;
use lion_core::train::{lr_at, Schedule};
use proptest::prelude::*;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..0.99f64, 0.0..0.99f64, 0.002..1.0f64, 0.002..1.0f64).prop_map(|(x, y, w, h)| {
        let x1 = (x + w).min(1.0).max(x + 0.002);
        let y1 = (y + h).min(1.0).max(y + 0.002);
        BBox::new(x, y, x1.min(1.0), y1.min(1.0)).unwrap()
    })
}

proptest! {
    #[test]
    fn box_text_round_trips(b in bbox()) {
        let text = serialize_bbox(&b);
        let back = parse_bbox(&text).unwrap();
        for (u, v) in b.coords().iter().zip(back.coords()) {
            prop_assert!((u - v).abs() <= 5e-4);
        }
        // a decoded box serializes to the same string
        prop_assert_eq!(serialize_bbox(&back), text);
    }

    #[test]
    fn iou_is_a_symmetric_similarity(a in bbox(), b in bbox()) {
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tokenizer_round_trips(s in "[a-z0-9 ,.\\[\\]?:']{0,60}") {
        let tok = Tokenizer::new();
        prop_assert_eq!(tok.decode(&tok.encode(&s).unwrap()).unwrap(), s);
    }

    #[test]
    fn schedule_warms_up_then_decays(steps in 2usize..400, warm in 0usize..200, lr in 1e-5..1e-1f64, frac in 0.0..1.0f64) {
        let s = Schedule { steps, warmup_steps: warm.min(steps - 1), lr_init: lr, lr_min: lr * frac };
        let lrs: Vec<f64> = (0..steps).map(|t| lr_at(t, &s)).collect();
        for t in 1..steps {
            if t < s.warmup_steps {
                prop_assert!(lrs[t] > lrs[t - 1]);
            } else if t == s.warmup_steps {
                // the peak, unless it is also the final step
                if t < steps - 1 {
                    prop_assert!((lrs[t] - lr).abs() <= 1e-15);
                }
            } else {
                prop_assert!(lrs[t] <= lrs[t - 1] + 1e-15);
            }
        }
        prop_assert!(lrs.iter().all(|&v| v <= lr + 1e-15));
        prop_assert!((lrs[steps - 1] - s.lr_min).abs() <= 1e-12 || s.warmup_steps == steps - 1);
    }
}
