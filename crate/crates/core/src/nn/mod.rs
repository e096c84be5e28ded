//! Hand-written forward/backward for conv + MLP networks split into an
//! extractor, a classifier head and a self-supervised proxy head.

pub mod checkpoint;
mod im2col;
mod layer;
mod loss;
mod network;

pub use checkpoint::{decode_network, encode_network, load_network, save_network};
pub use im2col::{im2col, ConvGeometry};
pub use layer::{Layer, LayerKind, ParamGrad};
pub use loss::{mse, softmax, softmax_cross_entropy};
pub(crate) use network::apply_plain as network_apply_plain;
pub use network::{Architecture, ConvBlock, ForwardOutput, Gradients, LayerMeans, Network, NetworkSpec};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::rng::RngState;
    use crate::tensor::Tensor;

    fn fc_spec(input: usize, classes: usize) -> NetworkSpec {
        NetworkSpec {
            input: vec![input, 1, 1],
            extractor: vec![],
            classes,
            proxy_outputs: 2,
        }
    }

    #[test]
    fn init_shapes_and_zero_bias() {
        let spec = NetworkSpec {
            input: vec![4],
            extractor: vec![LayerKind::FullyConnected { inputs: 4, outputs: 3 }],
            classes: 2,
            proxy_outputs: 2,
        };
        let net = Network::init(&spec, &mut RngState::new(3)).unwrap();
        let fc = &net.extractor()[0];
        assert_eq!(fc.weight().unwrap().shape(), &[3, 4]);
        assert_eq!(fc.bias().unwrap().shape(), &[3]);
        assert!(fc.bias().unwrap().data().iter().all(|&b| b == 0.0));
        let again = Network::init(&spec, &mut RngState::new(3)).unwrap();
        assert_eq!(net.flat_params(), again.flat_params());
    }

    #[test]
    fn he_variance() {
        let fan_in = 50;
        let spec = NetworkSpec {
            input: vec![fan_in],
            extractor: vec![LayerKind::FullyConnected {
                inputs: fan_in,
                outputs: 2000,
            }],
            classes: 2,
            proxy_outputs: 2,
        };
        let net = Network::init(&spec, &mut RngState::new(8)).unwrap();
        let w = net.extractor()[0].weight().unwrap().data();
        assert_eq!(w.len(), 100_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        let want = 2.0 / fan_in as f64;
        assert!((var - want).abs() / want < 0.2, "{var} vs {want}");
    }

    #[test]
    fn chain_break_names_layers() {
        let spec = NetworkSpec {
            input: vec![4],
            extractor: vec![
                LayerKind::FullyConnected { inputs: 4, outputs: 3 },
                LayerKind::FullyConnected { inputs: 5, outputs: 2 },
            ],
            classes: 2,
            proxy_outputs: 2,
        };
        match Network::from_spec(&spec) {
            Err(Error::Config(msg)) => assert!(msg.contains("#0 fc") && msg.contains("#1 fc"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let mut net = Network::from_spec(&fc_spec(3, 2)).unwrap();
        let (w, _) = (
            net.classifier().weight().unwrap().clone(),
            net.classifier().bias().unwrap().clone(),
        );
        net.classifier_mut()
            .set_params(w, Tensor::vector(vec![0.5, -1.0]).unwrap())
            .unwrap();
        let out = net.forward(&Tensor::zeros(&[2, 3, 1, 1])).unwrap();
        assert_eq!(out.class_logits.data(), &[0.5, -1.0, 0.5, -1.0]);
    }

    #[test]
    fn identical_images_identical_rows() {
        let arch = Architecture {
            input: [1, 4, 4],
            conv: vec![ConvBlock {
                out_channels: 3,
                kernel: 2,
                stride: 1,
                padding: 0,
                pool: 0,
            }],
            hidden: vec![5],
            classes: 3,
            proxy_outputs: 4,
        };
        let net = Network::init(&arch.network_spec().unwrap(), &mut RngState::new(2)).unwrap();
        let img: Vec<f64> = (0..16).map(|i| i as f64 / 16.0).collect();
        let x = Tensor::new(vec![2, 1, 4, 4], [img.clone(), img].concat()).unwrap();
        let out = net.infer(&x).unwrap();
        assert_eq!(out.class_logits.row(0), out.class_logits.row(1));
        assert_eq!(net.infer(&x).unwrap().class_logits, out.class_logits);
    }

    #[test]
    fn hand_computed_single_fc() {
        // 1×1 image with 2 channels straight into the classifier.
        let mut net = Network::from_spec(&NetworkSpec {
            input: vec![2, 1, 1],
            extractor: vec![],
            classes: 2,
            proxy_outputs: 2,
        })
        .unwrap();
        net.classifier_mut()
            .set_params(
                Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap(),
                Tensor::vector(vec![0.1, 0.2]).unwrap(),
            )
            .unwrap();
        let out = net.infer(&Tensor::new(vec![1, 2, 1, 1], vec![3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(out.class_logits.data(), &[3.0 + 8.0 + 0.1, -3.0 + 2.0 + 0.2]);
    }

    #[test]
    fn backward_requires_forward() {
        let mut net = Network::from_spec(&fc_spec(3, 2)).unwrap();
        assert!(matches!(
            net.backward(&Tensor::zeros(&[1, 2]), None, None),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn null_and_proxy_only_gradients() {
        let spec = NetworkSpec {
            input: vec![3],
            extractor: vec![LayerKind::FullyConnected { inputs: 3, outputs: 4 }, LayerKind::ReLU],
            classes: 2,
            proxy_outputs: 3,
        };
        let mut net = Network::init(&spec, &mut RngState::new(5)).unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.9, 1.0, 0.4, -0.5]).unwrap();
        net.forward(&x).unwrap();
        let g = net.backward(&Tensor::zeros(&[2, 2]), None, None).unwrap();
        assert!(g.is_zero());
        assert!(!net.extractor()[0].has_cached_input());

        let out = net.forward(&x).unwrap();
        let (_, dp) = softmax_cross_entropy(&out.proxy_logits, &[0, 2], None).unwrap();
        let g = net.backward(&Tensor::zeros(&[2, 2]), Some(&dp), None).unwrap();
        assert!(g.classifier.is_zero());
        assert!(!g.extractor_is_zero());
        assert!(!g.proxy.is_zero());
    }

    #[test]
    fn mean_input_is_augmented() {
        let mut net = Network::from_spec(&fc_spec(2, 2)).unwrap();
        net.forward(&Tensor::new(vec![2, 2, 1, 1], vec![1.0, 2.0, 3.0, 6.0]).unwrap())
            .unwrap();
        let m = net.take_mean_inputs().unwrap();
        assert_eq!(m.classifier, vec![2.0, 4.0, 1.0]);
        assert!(matches!(net.take_mean_inputs(), Err(Error::State(_))));
    }
}
