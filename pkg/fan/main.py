"""
Точка входа FAN: командная строка жизненного цикла плагинов, симуляция, бенчмарк
и сокетный режим relay/client

Коды выхода: 0 при успехе, 1 при операционной ошибке, 2 при ошибке использования.
"""

import argparse
import asyncio
import logging
import sys
import time
from pathlib import Path
from typing import Callable, List, Optional

from fan.abi import EventKind, parse_capabilities
from fan.client.circuit import CircuitState, Client
from fan.config import config
from fan.exceptions import CircuitError, ConfigError, FanError
from fan.harness.bench import bench_attach
from fan.harness.sim import load_sim_config, run_sim
from fan.harness.sockets import (
    LinkTransport,
    load_onion_directory,
    onion_private_key,
    parse_address,
    write_onion_entry,
)
from fan.plugins.keys import SigningKey, load_public_key, load_trust_dir
from fan.plugins.manifest import Repository, resolve_plugin, verify_manifest
from fan.plugins.package import build_package, parse_and_verify, parse_version, peek_header
from fan.protocol.crypto import CryptoProvider, StreamProvider, TestProvider
from fan.relay.node import RelayNode, RelayPolicy, node_id_from_name
from fan.toolkit.assembler import assemble_with_labels
from fan.utils.canonical import to_hex
from fan.utils.messages import (
    format_bench_report,
    format_bytes,
    format_package_info,
    format_trace_summary,
)
from fan.utils.scheduler import shutdown_scheduler, start_scheduler
from fan.vm.disassembler import disassemble
from fan.vm.isa import parse_program

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Неверные аргументы, которые argparse не может проверить сам"""


def setup_logging(level: Optional[str] = None, report_sink: Optional[str] = None) -> None:
    """Логи на stderr; отчёты fan.reports: по одной JSON-строке в FAN_REPORT_SINK"""
    level = level or config.log_level
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[logging.StreamHandler(sys.stderr)],
    )

    sink = report_sink or config.report_sink
    reports = logging.getLogger("fan.reports")
    reports.propagate = False
    reports.setLevel(logging.INFO)
    for handler in list(reports.handlers):
        reports.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr) if sink == "-" else logging.FileHandler(sink)
    handler.setFormatter(logging.Formatter("%(message)s"))
    reports.addHandler(handler)


def _monotonic_ms() -> int:
    return time.monotonic_ns() // 1_000_000


def _node_policy() -> RelayPolicy:
    return RelayPolicy(
        max_capabilities=config.max_capabilities,
        gas_per_event=config.gas_per_event,
        emit_budget=config.emit_budget,
        max_timer_delay_ms=config.max_timer_delay_ms,
    )


# ===== Инструменты =====


def cmd_asm(args: argparse.Namespace) -> int:
    source = Path(args.input).read_text(encoding="utf-8")
    code, labels = assemble_with_labels(source)
    Path(args.output).write_bytes(code)
    print(f"{args.output}: {len(code) // 8} instructions, {len(labels)} labels")
    if args.labels:
        for label, index in sorted(labels.items(), key=lambda item: item[1]):
            print(f"  {index:>5}  {label}")
    return EXIT_OK


def cmd_disasm(args: argparse.Namespace) -> int:
    print(disassemble(parse_program(Path(args.input).read_bytes())), end="")
    return EXIT_OK


def cmd_keygen(args: argparse.Namespace) -> int:
    key = SigningKey.generate()
    public_path = key.save(args.output)
    print(f"key_id {to_hex(key.key_id)}")
    print(f"private key: {args.output}")
    print(f"public key:  {public_path}")
    return EXIT_OK


def _parse_entry(text: str, labels: dict) -> tuple:
    event, sep, target = text.partition("=")
    if not sep:
        raise UsageError(f"--entry must be EVENT=PC, got {text}")
    event = event.strip()
    try:
        event_id = int(event, 0) if event[:1].isdigit() else int(EventKind[event.upper()])
    except KeyError:
        raise UsageError(f"unknown event {event}")
    target = target.strip()
    if target in labels:
        return event_id, labels[target]
    try:
        return event_id, int(target, 0)
    except ValueError:
        raise UsageError(f"entry target {target} is neither a label nor an instruction index")


def cmd_package(args: argparse.Namespace) -> int:
    code_path = Path(args.code)
    labels: dict = {}
    if code_path.suffix == ".fasm":
        code, labels = assemble_with_labels(code_path.read_text(encoding="utf-8"))
    else:
        code = code_path.read_bytes()

    try:
        version = parse_version(args.version)
        capability_mask = parse_capabilities(args.caps)
        features = [int(item, 0) for item in args.feature.split(",") if item.strip()]
    except ValueError as e:
        raise UsageError(str(e))
    entries = [_parse_entry(text, labels) for text in args.entry]

    data = build_package(
        name=args.name,
        version=version,
        capability_mask=capability_mask,
        feature_ids=features,
        entries=entries,
        memory_size=args.memory,
        code=code,
        signing_key=SigningKey.load(args.key),
        flags=1 if args.ephemeral_only else 0,
    )
    Path(args.output).write_bytes(data)
    print(f"{args.output}: {args.name} {args.version}, {format_bytes(len(data))}")
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    data = Path(args.package).read_bytes()
    if args.repo:
        repo = Repository(args.repo)
        manifest = repo.load()
        verify_manifest(manifest)
        name, _ = peek_header(data)
        resolve_plugin(manifest, name, data)
        print(f"manifest: targets v{manifest.targets.version} lists {name}")
    package = parse_and_verify(data, load_trust_dir(args.trust))
    print(format_package_info(package))
    return EXIT_OK


# ===== Репозиторий =====


def cmd_repo_init(args: argparse.Namespace) -> int:
    keys = [load_public_key(path) for path in args.root_key]
    try:
        Repository.init(args.directory, keys, args.threshold, expires_days=args.expires_days)
    except ValueError as e:
        raise UsageError(str(e))
    print(f"{args.directory}: {args.threshold}-of-{len(keys)} repository")
    return EXIT_OK


def cmd_repo_add(args: argparse.Namespace) -> int:
    max_caps = parse_capabilities(args.max_caps) if args.max_caps else None
    name = Repository(args.directory).add(Path(args.package).read_bytes(), max_caps)
    print(f"added {name}; targets must be signed again")
    return EXIT_OK


def cmd_repo_remove(args: argparse.Namespace) -> int:
    Repository(args.directory).remove(args.name)
    print(f"removed {args.name}; targets must be signed again")
    return EXIT_OK


def cmd_repo_sign(args: argparse.Namespace) -> int:
    count = Repository(args.directory).sign(SigningKey.load(args.key))
    print(f"targets carry {count} signatures")
    return EXIT_OK


# ===== Симуляция и бенчмарк =====


def cmd_sim_run(args: argparse.Namespace) -> int:
    trace = run_sim(load_sim_config(args.config))
    if args.trace:
        trace.dump(args.trace)
    print(format_trace_summary(trace))
    return EXIT_OK if trace.passed else EXIT_FAILURE


def cmd_bench_attach(args: argparse.Namespace) -> int:
    iterations = config.bench_iterations if args.iters is None else args.iters
    if iterations < 1:
        raise UsageError(f"--iters must be >= 1, got {iterations}")
    result = bench_attach(
        args.package,
        iterations,
        load_trust_dir(args.trust or config.trust_dir),
        memory_size=args.memory,
        gas=config.gas_per_event,
        measure_cold=not args.warm_only,
    )
    if args.out:
        result.write(args.out)
    print(format_bench_report(result))
    return EXIT_OK


# ===== Сокетный режим =====


def _socket_provider(args: argparse.Namespace) -> CryptoProvider:
    if args.provider == "test":
        return TestProvider()
    return StreamProvider(load_onion_directory(args.directory) if args.directory else {})


async def _relay_run(args: argparse.Namespace) -> None:
    key = SigningKey.load(args.key)
    node_id = node_id_from_name(args.name)
    if args.provider == "test":
        private_key = node_id
    else:
        private_key = onion_private_key(key.private_seed)
        if args.directory:
            write_onion_entry(args.directory, args.name, private_key)

    relay = RelayNode(
        node_id=node_id,
        private_key=private_key,
        provider=_socket_provider(args),
        trusted_keys=load_trust_dir(args.trust or config.trust_dir),
        policy=_node_policy(),
        clock=_monotonic_ms,
    )
    for path in args.plugin:
        attachment = relay.attach_global(Path(path).read_bytes())
        logger.info(f"Global plugin {attachment.name} attached")

    transport = LinkTransport(relay)
    start_scheduler()
    try:
        await transport.listen(*parse_address(args.listen))
        for address in args.peer:
            await transport.connect(*parse_address(address))
        await transport.serve_forever()
    finally:
        await transport.close()
        shutdown_scheduler()


async def _wait_for(predicate: Callable[[], bool], timeout_ms: int) -> bool:
    deadline = _monotonic_ms() + timeout_ms
    while not predicate():
        if _monotonic_ms() >= deadline:
            return False
        await asyncio.sleep(0.01)
    return True


async def _client_run(args: argparse.Namespace) -> None:
    route = [node_id_from_name(name) for name in args.route.split(",") if name]
    client = Client(
        node_id=node_id_from_name(args.name),
        provider=_socket_provider(args),
        directory=set(route),
        trusted_keys=load_trust_dir(args.trust or config.trust_dir),
        policy=_node_policy(),
        clock=_monotonic_ms,
        build_timeout_ms=config.build_timeout_ms,
        inject_timeout_ms=config.inject_timeout_ms,
    )
    transport = LinkTransport(client)
    start_scheduler()
    try:
        entry = await transport.connect(*parse_address(args.connect))
        if not route or entry != route[0]:
            raise ConfigError("the first hop of --route must be the relay given in --connect")

        handle = client.build_circuit(route)
        transport.execute(client.take_actions())
        await transport.flush()
        await _wait_for(lambda: handle.state != CircuitState.BUILDING, config.build_timeout_ms)
        transport.execute(client.expire_build(handle))
        if not handle.is_open:
            raise CircuitError(f"circuit build failed: {handle.close_reason}")
        print(f"circuit open over {len(route)} hops")

        if args.inject:
            client.inject_plugin(handle, args.hop, Path(args.inject).read_bytes())
            transport.execute(client.take_actions())
            await transport.flush()
            await _wait_for(lambda: not handle.pending_injections, config.inject_timeout_ms)
            transport.execute(client.expire_injection(handle, force=True))
            for result in handle.injection_results:
                if result.ok:
                    print(f"hop {result.hop_index}: {result.plugin} in {result.latency_us} us")
                else:
                    print(f"hop {result.hop_index}: error {result.code} {result.detail}")

        if args.data is not None:
            client.send_data(handle, args.data.encode("utf-8"))
            transport.execute(client.take_actions())
            await transport.flush()
            if await _wait_for(lambda: bool(handle.received_data), config.inject_timeout_ms):
                for stream_id, data in client.recv_data(handle):
                    print(f"stream {stream_id}: {data.decode('utf-8', errors='replace')}")
            else:
                print("no echo received")

        client.close(handle)
        transport.execute(client.take_actions())
        await transport.flush()
    finally:
        await transport.close()
        shutdown_scheduler()


def cmd_relay_run(args: argparse.Namespace) -> int:
    asyncio.run(_relay_run(args))
    return EXIT_OK


def cmd_client_run(args: argparse.Namespace) -> int:
    asyncio.run(_client_run(args))
    return EXIT_OK


# ===== Разбор аргументов =====


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fan", description="FAN protocol-plugin framework")
    parser.add_argument("--log-level", default=None, help="override FAN_LOG_LEVEL")
    commands = parser.add_subparsers(dest="command", required=True)

    asm = commands.add_parser("asm", help="assemble a .fasm source")
    asm.add_argument("input")
    asm.add_argument("-o", "--output", required=True)
    asm.add_argument("--labels", action="store_true", help="print the label table")
    asm.set_defaults(handler=cmd_asm)

    disasm = commands.add_parser("disasm", help="disassemble bytecode")
    disasm.add_argument("input")
    disasm.set_defaults(handler=cmd_disasm)

    keygen = commands.add_parser("keygen", help="generate an Ed25519 signing key")
    keygen.add_argument("-o", "--output", required=True)
    keygen.set_defaults(handler=cmd_keygen)

    package = commands.add_parser("package", help="build and sign a plugin package")
    package.add_argument("--code", required=True, help=".fasm source or raw bytecode")
    package.add_argument("--name", required=True)
    package.add_argument("--version", required=True, help="X.Y.Z")
    package.add_argument("--caps", default="", help="capability names or mask")
    package.add_argument("--feature", default="", help="comma-separated feature ids")
    package.add_argument("--entry", action="append", default=[], help="EVENT=PC or EVENT=label")
    package.add_argument("--memory", type=int, default=4096)
    package.add_argument("--key", required=True)
    package.add_argument("--ephemeral-only", action="store_true")
    package.add_argument("-o", "--output", required=True)
    package.set_defaults(handler=cmd_package)

    repo = commands.add_parser("repo", help="manage a plugin repository")
    repo_commands = repo.add_subparsers(dest="repo_command", required=True)
    repo_init = repo_commands.add_parser("init")
    repo_init.add_argument("directory")
    repo_init.add_argument("--root-key", action="append", required=True, help="public key file")
    repo_init.add_argument("--threshold", type=int, default=1)
    repo_init.add_argument("--expires-days", type=int, default=365)
    repo_init.set_defaults(handler=cmd_repo_init)
    repo_add = repo_commands.add_parser("add")
    repo_add.add_argument("directory")
    repo_add.add_argument("package")
    repo_add.add_argument("--max-caps", default=None)
    repo_add.set_defaults(handler=cmd_repo_add)
    repo_remove = repo_commands.add_parser("remove")
    repo_remove.add_argument("directory")
    repo_remove.add_argument("name")
    repo_remove.set_defaults(handler=cmd_repo_remove)
    repo_sign = repo_commands.add_parser("sign")
    repo_sign.add_argument("directory")
    repo_sign.add_argument("--key", required=True)
    repo_sign.set_defaults(handler=cmd_repo_sign)

    verify = commands.add_parser("verify", help="verify a package against a trust store")
    verify.add_argument("package")
    verify.add_argument("--trust", default=config.trust_dir)
    verify.add_argument("--repo", default=None, help="also check the repository manifest")
    verify.set_defaults(handler=cmd_verify)

    sim = commands.add_parser("sim", help="deterministic simulation")
    sim_commands = sim.add_subparsers(dest="sim_command", required=True)
    sim_run = sim_commands.add_parser("run")
    sim_run.add_argument("config")
    sim_run.add_argument("--trace", default=None, help="write JSON-lines trace here")
    sim_run.set_defaults(handler=cmd_sim_run)

    bench = commands.add_parser("bench", help="attach-latency benchmark")
    bench_commands = bench.add_subparsers(dest="bench_command", required=True)
    bench_attach_parser = bench_commands.add_parser("attach")
    bench_attach_parser.add_argument("package")
    bench_attach_parser.add_argument("--iters", type=int, default=None)
    bench_attach_parser.add_argument("--trust", default=None)
    bench_attach_parser.add_argument("--memory", type=int, default=None)
    bench_attach_parser.add_argument("--out", default=None)
    bench_attach_parser.add_argument("--warm-only", action="store_true")
    bench_attach_parser.set_defaults(handler=cmd_bench_attach)

    relay = commands.add_parser("relay", help="socket-mode relay")
    relay_commands = relay.add_subparsers(dest="relay_command", required=True)
    relay_run = relay_commands.add_parser("run")
    relay_run.add_argument("--name", required=True)
    relay_run.add_argument("--listen", required=True, help="host:port")
    relay_run.add_argument("--key", required=True)
    relay_run.add_argument("--trust", default=None)
    relay_run.add_argument("--peer", action="append", default=[], help="relay to link with")
    relay_run.add_argument("--plugin", action="append", default=[], help="global plugin")
    relay_run.add_argument("--provider", choices=("stream", "test"), default="stream")
    relay_run.add_argument("--directory", default=None, help="onion key directory")
    relay_run.set_defaults(handler=cmd_relay_run)

    client = commands.add_parser("client", help="socket-mode client")
    client_commands = client.add_subparsers(dest="client_command", required=True)
    client_run = client_commands.add_parser("run")
    client_run.add_argument("--name", default="client")
    client_run.add_argument("--connect", required=True, help="entry relay host:port")
    client_run.add_argument("--route", required=True, help="comma-separated relay names")
    client_run.add_argument("--data", default=None)
    client_run.add_argument("--inject", default=None, help="package to deliver")
    client_run.add_argument("--hop", type=int, default=1)
    client_run.add_argument("--trust", default=None)
    client_run.add_argument("--provider", choices=("stream", "test"), default="stream")
    client_run.add_argument("--directory", default=None, help="onion key directory")
    client_run.set_defaults(handler=cmd_client_run)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK

    setup_logging(args.log_level)
    try:
        return args.handler(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FanError, OSError, ValueError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_FAILURE
    except KeyboardInterrupt:
        logger.info("Stopped by user (Ctrl+C)")
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
