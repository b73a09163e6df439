use crate::autodiff::{Graph, NodeId, TensorError};

/// KL(P_SLM ‖ P_LLM) with gradients reaching the client model only.
pub fn reverse_kl_loss(g: &mut Graph, slm_probs: NodeId, llm_probs: NodeId) -> Result<NodeId, TensorError> {
    let teacher = g.detach(llm_probs);
    g.kl_div(slm_probs, teacher)
}

/// The same divergence KL(P_SLM ‖ P_LLM), with gradients reaching the
/// server model only.
pub fn forward_kl_loss(g: &mut Graph, llm_probs: NodeId, slm_probs: NodeId) -> Result<NodeId, TensorError> {
    let student = g.detach(slm_probs);
    g.kl_div(student, llm_probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn two_models(g: &mut Graph) -> (NodeId, NodeId, NodeId, NodeId) {
        let zs = g.param(Tensor::matrix(2, 3, vec![0.2, -0.1, 0.5, 1.0, 0.0, -1.0]).unwrap()).unwrap();
        let zl = g.param(Tensor::matrix(2, 3, vec![-0.3, 0.4, 0.1, 0.0, 0.7, 0.2]).unwrap()).unwrap();
        let ps = g.softmax(zs, 1).unwrap();
        let pl = g.softmax(zl, 1).unwrap();
        (zs, zl, ps, pl)
    }

    #[test]
    fn detachment_direction() {
        let mut g = Graph::new();
        let (zs, zl, ps, pl) = two_models(&mut g);
        let rev = reverse_kl_loss(&mut g, ps, pl).unwrap();
        let fwd = forward_kl_loss(&mut g, pl, ps).unwrap();
        assert_eq!(g.value(rev).item(), g.value(fwd).item());
        let gr = g.backward(rev).unwrap();
        assert!(gr.get(zs).unwrap().data().iter().any(|&v| v != 0.0));
        assert!(gr.get(zl).is_none());
        let gf = g.backward(fwd).unwrap();
        assert!(gf.get(zl).unwrap().data().iter().any(|&v| v != 0.0));
        assert!(gf.get(zs).is_none());
    }

    #[test]
    fn hand_value_and_zero_at_equality() {
        let mut g = Graph::new();
        let s = g.param(Tensor::vector(vec![1.0, 0.0])).unwrap();
        let l = g.constant(Tensor::vector(vec![0.5, 0.5])).unwrap();
        let k = reverse_kl_loss(&mut g, s, l).unwrap();
        assert!((g.value(k).item() - std::f64::consts::LN_2).abs() < 1e-15);

        let mut g = Graph::new();
        let z = g.param(Tensor::matrix(1, 3, vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
        let p = g.softmax(z, 1).unwrap();
        let q = g.softmax(z, 1).unwrap();
        let k = reverse_kl_loss(&mut g, p, q).unwrap();
        assert_eq!(g.value(k).item(), 0.0);
        let grads = g.backward(k).unwrap();
        assert!(grads.get(z).unwrap().data().iter().all(|v| v.abs() < 1e-15));
    }
}
