use candle_core::{Device, Tensor, Var};
use mfrnet::ops;

fn nan_count(t: &Tensor) -> usize {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().filter(|v| v.is_nan()).count()
}

#[test]
fn bisect() {
    let dev = Device::Cpu;
    let data: Vec<f64> = (0..36).map(|i| (i as f64) * 0.1 - 1.5).collect();
    let x = Var::from_tensor(&Tensor::from_vec(data.clone(), (1, 6, 6), &dev).unwrap()).unwrap();

    let x4 = x.as_tensor().reshape((1, 1, 6, 6)).unwrap();
    let y = ops::replicate_pad(&x4, 2).unwrap();
    let loss = y.sqr().unwrap().sum_all().unwrap();
    let g = loss.backward().unwrap();
    println!("replicate_pad grad nan: {}", nan_count(g.get(&x).unwrap()));

    let y = ops::window_mean(x.as_tensor(), 5).unwrap();
    let loss = y.sqr().unwrap().sum_all().unwrap();
    let g = loss.backward().unwrap();
    println!("window_mean grad nan: {}", nan_count(g.get(&x).unwrap()));

    let a = ops::window_mean(x.as_tensor(), 5).unwrap();
    let b = (ops::window_mean(&x.sqr().unwrap(), 5).unwrap() + 0.01).unwrap();
    let loss = a.div(&b).unwrap().sum_all().unwrap();
    let g = loss.backward().unwrap();
    println!("div grad nan: {}", nan_count(g.get(&x).unwrap()));

    panic!("done");
}
