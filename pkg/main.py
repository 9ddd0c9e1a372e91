#!/usr/bin/env python3
"""
三元组嵌入实验工具
合成语料 -> 梅尔特征 -> 三元组采样 -> 度量学习 -> 检索/分类评估
"""

import argparse
import logging
import sys
from pathlib import Path

from config import Config, SOURCE_NAMES, SWEEP_PARAMS, set_config
from errors import ConfigError, OrderingCheckError, TripletForgeError
from experiment import ExperimentRunner, LOGMEL
from run_manager import RunManager
from synthcorpus import SPLITS
from system_monitor import Footprint, SystemMonitor
from utils import setup_logging, Colors

DEFAULT_CONFIG = 'config.json'
DEFAULT_RECIPE = 'experiments/orderings.json'

# 命令行参数 -> 配置键
FLAG_KEYS = {
    'sigma': 'sampler.sigma',
    'freq_shift': 'sampler.freq_shift',
    'alpha': 'sampler.alpha',
    'delta_t': 'sampler.delta_t_s',
    'pairs_per_anchor': 'sampler.pairs_per_anchor',
    'n': 'sampler.n_triplets',
    'method': 'sampler.method',
    'steps': 'training.steps',
    'per_class': 'eval.qbe_per_class',
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, help=f'配置文件路径（默认: 存在时读取 {DEFAULT_CONFIG}）')
    common.add_argument('--seed', type=int, help='全局随机种子')
    common.add_argument('--threads', type=int, help='工作线程数（覆盖 TRIPLET_FORGE_THREADS）')
    common.add_argument('--work-dir', help='产物目录（默认: work）')
    common.add_argument('--metadata-dir', help='运行记录目录（默认: metadata）')
    common.add_argument('--logs-dir', help='日志目录（默认: logs）')
    common.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help='覆盖任意配置键，值按 JSON 解析，可重复')
    common.add_argument('-v', '--verbose', action='store_true', help='输出调试日志')

    parser = argparse.ArgumentParser(
        description='三元组嵌入实验工具 - 无监督音频表示学习',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
示例用法:
  # 生成语料并提取特征
  python main.py gen-corpus --seed 7 --out work/corpus
  python main.py featurize

  # 采样、训练、嵌入
  python main.py sample-triplets --method translation --n 4000 --freq-shift 10
  python main.py train --triplets work/triplets/translation.trip --steps 300 --out work/models/translation.ckpt
  python main.py embed --model work/models/translation.ckpt --split eval
  python main.py embed --model logmel --split eval

  # 评估
  python main.py eval-qbe --embeddings work/embeddings/translation.eval.emb
  python main.py sweep --param freq-shift --grid 0,2,5,10

  # 整套对比实验
  python main.py report --recipe experiments/orderings.json
        """
    )
    subparsers = parser.add_subparsers(dest='command', help='可用命令')

    gen_parser = subparsers.add_parser('gen-corpus', parents=[common], help='生成合成声音事件语料')
    gen_parser.add_argument('--out', help='语料目录（默认: <work>/corpus）')

    feat_parser = subparsers.add_parser('featurize', parents=[common], help='提取梅尔能量谱分片')
    feat_parser.add_argument('--corpus', help='语料目录')
    feat_parser.add_argument('--out', help='特征目录')

    sample_parser = subparsers.add_parser('sample-triplets', parents=[common], help='采样三元组')
    sample_parser.add_argument('--method', choices=list(SOURCE_NAMES) + ['joint'], help='采样方法')
    sample_parser.add_argument('--n', type=int, help='三元组数量')
    sample_parser.add_argument('--sigma', type=float, help='噪声标准差 σ')
    sample_parser.add_argument('--freq-shift', type=int, help='频率平移范围 S')
    sample_parser.add_argument('--alpha', type=float, help='混合系数 α')
    sample_parser.add_argument('--delta-t', type=float, help='时间邻近窗口 Δt（秒）')
    sample_parser.add_argument('--pairs-per-anchor', type=int, help='每个 anchor 的正例对数')
    sample_parser.add_argument('--split', choices=SPLITS, default='train', help='采样划分')
    sample_parser.add_argument('--out', help='三元组分片路径')

    train_parser = subparsers.add_parser('train', parents=[common], help='训练嵌入网络')
    train_parser.add_argument('--triplets', required=True, help='三元组分片路径')
    train_parser.add_argument('--model-config', help='网络结构 JSON（默认取配置 model 节）')
    train_parser.add_argument('--steps', type=int, help='训练步数')
    train_parser.add_argument('--out', help='检查点路径')

    embed_parser = subparsers.add_parser('embed', parents=[common], help='计算窗口嵌入')
    embed_parser.add_argument('--model', required=True, help=f"检查点路径，或 '{LOGMEL}' 表示原始对数梅尔")
    embed_parser.add_argument('--split', choices=SPLITS, default='eval', help='数据划分')
    embed_parser.add_argument('--out', help='嵌入库路径')

    qbe_parser = subparsers.add_parser('eval-qbe', parents=[common], help='按例查询检索评估')
    qbe_parser.add_argument('--embeddings', nargs='+', required=True, help='一个或多个嵌入库')
    qbe_parser.add_argument('--baseline', help='作为基线的嵌入库（计算差距恢复率）')
    qbe_parser.add_argument('--topline', help='作为上限的嵌入库（计算差距恢复率）')
    qbe_parser.add_argument('--per-class', type=int, help='每类 present/absent 片段数 P')
    qbe_parser.add_argument('--out', help='结果 CSV')

    cls_parser = subparsers.add_parser('eval-classifier', parents=[common], help='浅层分类器评估')
    cls_parser.add_argument('--train-embeddings', required=True, help='训练划分嵌入库')
    cls_parser.add_argument('--eval-embeddings', required=True, help='评估划分嵌入库')
    cls_parser.add_argument('--dev-embeddings', help='开发划分嵌入库（早停）')
    cls_parser.add_argument('--hidden-layers', type=int, help='隐层数')
    cls_parser.add_argument('--out', help='结果 CSV')

    light_parser = subparsers.add_parser('light-supervision', parents=[common], help='少量监督协议')
    light_parser.add_argument('--train-embeddings', required=True, help='训练划分嵌入库')
    light_parser.add_argument('--eval-embeddings', required=True, help='评估划分嵌入库')
    light_parser.add_argument('--dev-embeddings', help='开发划分嵌入库（早停）')
    light_parser.add_argument('--k', type=int, help='每类片段数')
    light_parser.add_argument('--trials', type=int, help='重复次数')
    light_parser.add_argument('--hidden-layers', type=int, default=1, help='隐层数')
    light_parser.add_argument('--out', help='结果 CSV')

    sweep_parser = subparsers.add_parser('sweep', parents=[common], help='采样超参数扫描')
    sweep_parser.add_argument('--param', choices=SWEEP_PARAMS, required=True, help='扫描参数')
    sweep_parser.add_argument('--grid', help='逗号分隔的取值（默认取配置 eval.sweep）')
    sweep_parser.add_argument('--out', help='结果 CSV')

    report_parser = subparsers.add_parser('report', parents=[common], help='执行实验配方生成对比表')
    report_parser.add_argument('--recipe', default=DEFAULT_RECIPE, help='实验配方 JSON')
    report_parser.add_argument('--out', help='报告目录')

    subparsers.add_parser('check-system', parents=[common], help='检查系统状态')
    subparsers.add_parser('config', parents=[common], help='显示解析后的配置')

    runs_parser = subparsers.add_parser('list-runs', parents=[common], help='列出运行记录')
    runs_parser.add_argument('--status', choices=['running', 'completed', 'failed'], help='按状态过滤')
    runs_parser.add_argument('--filter-command', help='按子命令过滤')
    return parser


def load_config(args):
    """配置文件 -> --set -> 专用命令行参数，依次覆盖"""
    config_file = args.config
    if config_file is None and Path(DEFAULT_CONFIG).exists():
        config_file = DEFAULT_CONFIG
    config = Config(config_file)
    for assignment in args.set:
        config.set_from_string(assignment)
    if args.seed is not None:
        config.set('seed', args.seed)
    for option, key in (('work_dir', 'paths.work_dir'), ('metadata_dir', 'paths.metadata_dir'),
                        ('logs_dir', 'paths.logs_dir')):
        if getattr(args, option, None):
            config.set(key, getattr(args, option))
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            config.set(key, value)
    return config


def parse_grid(text):
    try:
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise ConfigError(f"无法解析扫描网格: {text}")


def print_config(config):
    print(f"\n{Colors.BOLD}=== 当前配置信息 ==={Colors.NC}")
    print(f"配置文件: {config.config_file or '(默认值)'}")
    print(f"工作目录: {config.get_work_dir()}")
    print(f"元数据目录: {config.get_metadata_dir()}")
    print(f"日志目录: {config.get_logs_dir()}")
    print(f"工作线程: {config.get('system.threads')}")
    for section in ('feature', 'corpus', 'sampler', 'model', 'training', 'eval'):
        print(f"\n{Colors.BOLD}[{section}]{Colors.NC}")
        for key, value in config.get(section).items():
            print(f"  {key}: {value}")


def print_runs(run_manager, status=None, command=None):
    runs = run_manager.list_runs(status=status, command=command)
    if not runs:
        print(f"{Colors.YELLOW}暂无运行记录{Colors.NC}")
        return
    print(f"\n{'ID':<28} {'命令':<18} {'状态':<10} {'种子':<8} {'创建时间':<20}")
    print("-" * 90)
    for run in runs:
        status_color = {
            'running': Colors.BLUE,
            'completed': Colors.GREEN,
            'failed': Colors.RED,
        }.get(run['status'], Colors.NC)
        print(f"{run['id']:<28} {run['command']:<18} {status_color}{run['status']:<10}{Colors.NC} "
              f"{run['seed']:<8} {run['created_at'][:19]:<20}")
        for name, value in run.get('metrics', {}).items():
            print(f"    {name}: {value:.4f}")
    stats = run_manager.get_run_stats()
    print(f"\n{Colors.BOLD}运行统计:{Colors.NC}")
    print(f"总计: {stats['total']}, 运行: {stats['running']}, 完成: {stats['completed']}, 失败: {stats['failed']}")


def output_dir_of(args, runner):
    """本次运行的输出目录，用于落盘解析后的配置"""
    out = getattr(args, 'out', None)
    if args.command == 'gen-corpus':
        return Path(out) if out else runner.corpus_dir
    if args.command == 'featurize':
        return Path(out) if out else runner.features_dir
    if args.command == 'report':
        return Path(out) if out else runner.work_dir / 'reports'
    if out:
        return Path(out).parent
    return runner.work_dir / 'runs' / args.command


def run_command(args, config, runner):
    """执行流水线子命令，返回写入运行记录的指标"""
    metrics = {}
    if args.command == 'gen-corpus':
        manifest = runner.gen_corpus(out_dir=args.out)
        counts = {split: len(manifest.by_split(split)) for split in SPLITS}
        print(f"{Colors.GREEN}✓ 已生成 {len(manifest.recordings)} 条录音, {manifest.n_classes} 个类别{Colors.NC}")
        print(f"  划分: {counts}")

    elif args.command == 'featurize':
        count = runner.featurize(corpus_dir=args.corpus, out_dir=args.out)
        print(f"{Colors.GREEN}✓ 已提取 {count} 条录音的特征{Colors.NC}")

    elif args.command == 'sample-triplets':
        method = config.get('sampler.method')
        records, path = runner.sample(method, out=args.out, split=args.split)
        print(f"{Colors.GREEN}✓ 已采样 {len(records)} 个 {method} 三元组: {path}{Colors.NC}")

    elif args.command == 'train':
        checkpoint, trace = runner.train(args.triplets, out=args.out, model_config=args.model_config)
        metrics['final_loss'] = trace[-1].loss
        print(f"{Colors.GREEN}✓ 训练完成 ({len(trace)} 步, 最终损失 {trace[-1].loss:.5f}): {checkpoint}{Colors.NC}")

    elif args.command == 'embed':
        path = runner.embed(args.model, args.split, args.out)
        print(f"{Colors.GREEN}✓ 嵌入已写出: {path}{Colors.NC}")

    elif args.command == 'eval-qbe':
        if len(args.embeddings) == 1 and not (args.baseline or args.topline):
            report = runner.eval_qbe(args.embeddings[0], out=args.out)
            for c in sorted(report.per_class_ap):
                print(f"  类别 {c}: AP {report.per_class_ap[c]:.4f} (P={report.per_class_p[c]})")
            if report.skipped:
                print(f"{Colors.YELLOW}  跳过的类别: {report.skipped}{Colors.NC}")
            metrics['qbe_map'] = report.map
            print(f"{Colors.GREEN}✓ QbE mAP: {report.map:.4f}{Colors.NC}")
        else:
            if bool(args.baseline) != bool(args.topline):
                raise ConfigError("--baseline 与 --topline 需要同时给出")
            embeddings = list(args.embeddings)
            for extra in (args.baseline, args.topline):
                if extra and extra not in embeddings:
                    embeddings.append(extra)
            for path, value, recovery in runner.compare_qbe(embeddings, args.baseline, args.topline, args.out):
                suffix = '' if recovery is None else f", 差距恢复 {recovery:.1f}%"
                print(f"  {path}: mAP {value:.4f}{suffix}")

    elif args.command == 'eval-classifier':
        report = runner.eval_classifier(args.train_embeddings, args.eval_embeddings, args.hidden_layers,
                                        args.dev_embeddings, out=args.out)
        metrics['classifier_map'] = report.map
        print(f"{Colors.GREEN}✓ 分类器 mAP: {report.map:.4f}{Colors.NC}")

    elif args.command == 'light-supervision':
        result = runner.light_supervision(args.train_embeddings, args.eval_embeddings, args.k, args.trials,
                                          args.hidden_layers, args.dev_embeddings, out=args.out)
        metrics['light_supervision_map'] = result.map
        print(f"{Colors.GREEN}✓ 少量监督 mAP: {result.map:.4f} (各次: "
              f"{', '.join(f'{m:.4f}' for m in result.trial_maps)}){Colors.NC}")

    elif args.command == 'sweep':
        grid = parse_grid(args.grid) if args.grid else None
        rows = runner.sweep(args.param, grid, out=args.out)
        for value, value_map in rows:
            metrics[f"{args.param}={value}"] = value_map

    elif args.command == 'report':
        result = runner.report(args.recipe, args.out)
        for check in result.checks:
            color = Colors.GREEN if check.passed else Colors.RED
            print(f"{color}{'✓' if check.passed else '✗'} {check.name}: {check.detail}{Colors.NC}")
        metrics.update({f"qbe_{name}": value for name, value in result.qbe.items()})
        if not result.passed:
            raise OrderingCheckError([check.name for check in result.checks if not check.passed])
    return metrics


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return 0

    try:
        config = set_config(load_config(args))
        setup_logging(config.get_logs_dir(), logging.DEBUG if args.verbose else logging.INFO)
        system_monitor = SystemMonitor(config.get('system.disk_space_threshold'))
        threads = args.threads if args.threads is not None else config.get_threads()
        if threads < 1:
            raise ConfigError(f"线程数必须 >= 1: {threads}")
        threads = system_monitor.resolve_threads(threads)
        config.set('system.threads', threads)

        if args.command == 'check-system':
            print(f"{Colors.BLUE}正在检查系统状态...{Colors.NC}")
            footprint = Footprint.from_config(config)
            check_result = system_monitor.comprehensive_check(config.get_work_dir(), threads, footprint)
            if not system_monitor.print_system_status(check_result):
                print(f"\n{Colors.RED}⚠ 系统检查发现问题，建议解决后再运行实验{Colors.NC}")
                return 1
            print(f"\n{Colors.GREEN}✓ 系统状态正常{Colors.NC}")
            return 0

        if args.command == 'config':
            print_config(config)
            return 0

        run_manager = RunManager(config)
        if args.command == 'list-runs':
            print_runs(run_manager, args.status, args.filter_command)
            return 0

        runner = ExperimentRunner(config, threads)
        run_id = run_manager.start_run(args.command, output_dir_of(args, runner))
        runner.on_output = lambda path: run_manager.add_output(run_id, path)
        try:
            metrics = run_command(args, config, runner)
        except Exception as e:
            run_manager.finish_run(run_id, 'failed', error_message=str(e))
            raise
        run_manager.finish_run(run_id, 'completed', metrics=metrics)
        return 0

    except KeyboardInterrupt:
        print(f"\n{Colors.YELLOW}操作被用户中断{Colors.NC}")
        return 1
    except TripletForgeError as e:
        logging.getLogger(__name__).error(f"{type(e).__name__}: {e}")
        print(f"{Colors.RED}✗ 错误: {e}{Colors.NC}")
        return e.exit_code
    except Exception as e:
        logging.getLogger(__name__).exception("未预期的错误")
        print(f"{Colors.RED}✗ 错误: {str(e)}{Colors.NC}")
        return 1


if __name__ == '__main__':
    sys.exit(main())
