use como_core::numcore::Rng;
use como_core::teachers::*;
use como_core::world::*;
use como_core::render::*;

fn main() {
    let mut rng = Rng::new(1);
    let net = DenoiserNet::new_layout(64, &mut rng);
    let x_t = rng.normal_tensor(&[32, 32, 3]);
    let prompt = ScenePrompt::from_groups(
        &[(2, 0, 0)],
        &[BoundingBox2D::new(0.1, 0.3, 0.4, 0.7).unwrap(), BoundingBox2D::new(0.5, 0.3, 0.9, 0.7).unwrap()],
    ).unwrap();

    // Forward only
    let start = std::time::Instant::now();
    let n = 200;
    for _ in 0..n {
        let _ = net.layout_denoise(&x_t, 10, &prompt).unwrap();
    }
    let fwd = start.elapsed().as_secs_f64() / n as f64;
    println!("layout forward: {:.3} ms", fwd * 1e3);

    // Forward + backward
    let cond = CondInput::Grounded { prompt: &prompt, camera: None };
    let start = std::time::Instant::now();
    for _ in 0..n {
        let (pred, cache) = net.predict_cached(&x_t, 10, &cond).unwrap();
        let mut grads = net.zero_grads();
        net.backward_cached(cache, &cond, &pred, &mut grads).unwrap();
    }
    let fb = start.elapsed().as_secs_f64() / n as f64;
    println!("layout fwd+bwd: {:.3} ms", fb * 1e3);

    // Render at production scale
    let mut scene = VoxelScene::new(32, -2.0, 0.0, 10.0);
    let mut r2 = Rng::new(2);
    for v in scene.density_raw.data_mut() { *v = r2.uniform_in(-3.0, 2.0); }
    let cam = Camera::front(3.5, 60.0);
    let start = std::time::Instant::now();
    for _ in 0..n {
        let _ = render(&scene, &cam, 32, 48);
    }
    println!("render 32x32 S=48: {:.3} ms", start.elapsed().as_secs_f64() / n as f64 * 1e3);

    let gp = r2.normal_tensor(&[32, 32, 3]);
    let start = std::time::Instant::now();
    for _ in 0..n {
        let _ = render_with_grad(&scene, &cam, 32, 48, &gp).unwrap();
    }
    println!("render_with_grad: {:.3} ms", start.elapsed().as_secs_f64() / n as f64 * 1e3);

    // mv forward
    let mv = DenoiserNet::new_multiview(64, 32, &mut rng);
    let refi = rng.normal_tensor(&[32, 32, 3]);
    let start = std::time::Instant::now();
    for _ in 0..n {
        let _ = mv.mv_denoise(&x_t, 10, &refi, &cam, &cam).unwrap();
    }
    println!("mv forward: {:.3} ms", start.elapsed().as_secs_f64() / n as f64 * 1e3);
}
