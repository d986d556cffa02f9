import json
import os

from PIL import Image

import udma.cli as CLI


def write_config(tmp_path):
    path = tmp_path / 'run.conf'
    path.write_text("range_width = 128\nrange_height = 16\nsynth_scans = 1\nsynth_sources = 1\n"
                    "feature_dim = 4\nbase_channels = 2\nknn_k = 2\ndisc_hidden = 8\n"
                    "train_steps = 1\nfine_tune_steps = 1\n")
    return str(path)


def test_synth_preseg_project_eval(tmp_path, capsys):
    config = write_config(tmp_path)
    data = str(tmp_path / 'data')
    assert CLI.run(['synth', '-g', config, '-o', data]) == 0
    scan = os.path.join(data, 'target', 'scan_0000.bin')
    labels = os.path.join(data, 'target', 'scan_0000.label')
    assert os.path.exists(scan)

    components = str(tmp_path / 'scan.components')
    assert CLI.run(['preseg', scan, '-g', config, '-o', components]) == 0
    assert os.path.exists(components + '.csv')

    range_image = str(tmp_path / 'scan.range')
    assert CLI.run(['project', scan, '-g', config, '-o', range_image, '--components', components]) == 0

    picture = str(tmp_path / 'scan.png')
    assert CLI.run(['viz', range_image, '-o', picture]) == 0
    with Image.open(picture) as opened:
        assert opened.size == (128, 16)

    capsys.readouterr()
    assert CLI.run(['eval', '--truth', labels, '--pred', labels, '--json']) == 0
    report = json.loads(capsys.readouterr().out)
    assert report['miou'] == 1.0
    assert report['points'] > 0


def test_train_then_eval_checkpoint(tmp_path, capsys):
    config = write_config(tmp_path)
    data = str(tmp_path / 'data')
    assert CLI.run(['synth', '-g', config, '-o', data]) == 0
    checkpoint = str(tmp_path / 'model.ckpt')
    metrics = str(tmp_path / 'metrics.jsonl')
    assert CLI.run(['train', '-g', config, '-c', checkpoint, '-m', metrics,
                    '--source', os.path.join(data, 'source'), '--target', os.path.join(data, 'target')]) == 0
    with open(metrics) as log_file:
        stages = [json.loads(line)['stage'] for line in log_file]
    assert stages == ['train', 'fine_tune']
    capsys.readouterr()
    assert CLI.run(['eval', '-g', config, '--checkpoint', checkpoint, '--target', os.path.join(data, 'target')]) == 0
    assert 'mIoU' in capsys.readouterr().out


def test_usage_errors_exit_1(tmp_path):
    assert CLI.run([]) == 1
    assert CLI.run(['nonsense']) == 1
    assert CLI.run(['eval']) == 1
    bad_config = tmp_path / 'bad.conf'
    bad_config.write_text("range_widht = 12\n")
    assert CLI.run(['synth', '-g', str(bad_config), '-o', str(tmp_path / 'data')]) == 1


def test_runtime_errors_exit_2(tmp_path):
    assert CLI.run(['preseg', str(tmp_path / 'missing.bin')]) == 2


def test_malformed_label_map_csv_exits_2(tmp_path, caplog):
    label_map_csv = tmp_path / 'label_map.csv'
    label_map_csv.write_text("raw_id,train_id\n40,0\ncar,1\n")
    config = tmp_path / 'run.conf'
    config.write_text(f"label_map_file = {label_map_csv}\n")
    labels = tmp_path / 'scan.label'
    labels.write_bytes(bytes([40, 0, 0, 0]) * 4)
    assert CLI.run(['eval', '-g', str(config), '--truth', str(labels), '--pred', str(labels)]) == 2
    errors = [record for record in caplog.records if record.levelname == 'ERROR']
    assert len(errors) == 1
    assert errors[0].getMessage().startswith('eval: ValueError')
