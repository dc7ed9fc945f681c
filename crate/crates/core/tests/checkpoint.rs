use tokenmix_core::arch::{Model, ModelConfig, Scale};
use tokenmix_core::checkpoint::{load_model, Checkpoint};
use tokenmix_core::nn::{Init, Module};
use tokenmix_core::stm::StmKind;
use tokenmix_core::{Error, Tensor};

fn tiny() -> ModelConfig {
    let mut c = ModelConfig::preset(StmKind::SwAttn, Scale::Micro);
    c.depths = [1, 1, 1, 1];
    c.num_classes = 5;
    c
}

/// Walks the byte layout independently of the library's reader.
fn parse(bytes: &[u8]) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let u32_at = |p: usize| u32::from_le_bytes(bytes[p..p + 4].try_into().unwrap());
    assert_eq!(&bytes[..4], b"STMW");
    assert_eq!(u32_at(4), 1);
    let count = u32_at(8) as usize;
    let mut pos = 12;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u16::from_le_bytes([bytes[pos], bytes[pos + 1]]) as usize;
        pos += 2;
        let name = String::from_utf8(bytes[pos..pos + len].to_vec()).unwrap();
        pos += len;
        assert_eq!(bytes[pos], 0, "dtype code");
        let rank = bytes[pos + 1] as usize;
        pos += 2;
        let dims: Vec<usize> = (0..rank)
            .map(|i| u64::from_le_bytes(bytes[pos + 8 * i..pos + 8 * i + 8].try_into().unwrap()) as usize)
            .collect();
        pos += 8 * rank;
        let n: usize = dims.iter().product();
        let data = (0..n).map(|i| f32::from_le_bytes(bytes[pos + 4 * i..pos + 4 * i + 4].try_into().unwrap())).collect();
        pos += 4 * n;
        out.push((name, dims, data));
    }
    assert_eq!(pos, bytes.len());
    out
}

#[test]
fn byte_layout_follows_enumeration_order() {
    let model = Model::build(&tiny(), 9).unwrap();
    let bytes = Checkpoint::from_module(&model).to_bytes().unwrap();
    let parsed = parse(&bytes);
    let mut expected = Vec::new();
    model.visit("", &mut |name, t| expected.push((name.to_string(), t.shape().to_vec(), t.data().to_vec())));
    assert_eq!(parsed, expected);
    assert_eq!(parsed[0].0, "stem.conv1.weight");
    assert_eq!(parsed.last().unwrap().0, "head.fc.bias");
}

#[test]
fn load_reproduces_outputs_and_rejects_bad_files() {
    let config = tiny();
    let model = Model::build(&config, 10).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.stmw");
    Checkpoint::from_module(&model).save(&path).unwrap();
    let loaded = load_model(&config, &Checkpoint::load(&path).unwrap()).unwrap();
    let x = Init::new(0).uniform(&[1, 3, 64, 64], -1.0, 1.0);
    assert_eq!(loaded.forward_classify(&x).unwrap(), model.forward_classify(&x).unwrap());

    let bytes = std::fs::read(&path).unwrap();
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));

    let mut other = config.clone();
    other.num_classes = 6;
    let err = load_model(&other, &Checkpoint::from_bytes(&bytes).unwrap()).unwrap_err().to_string();
    assert!(err.contains("head.fc.weight"), "{err}");

    let mut renamed = Checkpoint::from_module(&model);
    renamed.tensors[0].1 = Tensor::zeros(&[1]).unwrap();
    let err = load_model(&config, &renamed).unwrap_err().to_string();
    assert!(err.contains("stem.conv1.weight"), "{err}");
}
