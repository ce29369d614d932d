"""Structured-data-reasoning game over synthetic Airline and Retail databases.

Each seed yields a scenario with a gold entity hidden among distractor
records. Mutation tasks are scored by comparing the final database hash to
the hash obtained by replaying the gold tool call on a fresh copy.
"""

from __future__ import annotations

import copy
import random
from dataclasses import dataclass, field
from typing import Any, Optional, Protocol

from ..core import BaseEnv, EnvSpec, Message, ToolCall
from ..kernels import content_hash
from .rewards import RewardBreakdown, contains
from .tools import Database, execute_tool, tool_names

STOP = "###STOP###"
DOMAINS = ("Airline", "Retail")
TASK_TYPES = ("conditional_fallback", "cross_entity_match", "progressive_disclosure")
SCENARIO_WEIGHTS: dict[str, dict[str, float]] = {
    d: {t: 1.0 for t in TASK_TYPES} for d in DOMAINS
}

# tier table: db_match & comm_pass -> 1.0, db_match only -> 0.3, else 0.0
FULL, PARTIAL, NONE = 1.0, 0.3, 0.0
# same tiers written as alpha*mult + (1-alpha)*add with weights {db: 1, comm: 0}
_TIER_ALPHA = 0.7

FIRST = ["Maya", "Liam", "Sofia", "Noah", "Aisha", "Mateo", "Yuki", "Omar", "Elena", "Kofi",
         "Priya", "Lucas", "Hana", "Diego", "Zara", "Ivan", "Mei", "Sam", "Nina", "Tariq"]
LAST = ["Patel", "Chen", "Garcia", "Okafor", "Kim", "Rossi", "Silva", "Novak", "Haddad",
        "Moreau", "Tanaka", "Brown", "Ali", "Larsen", "Costa", "Singh"]
CITIES = ["Boston", "Denver", "Seattle", "Atlanta", "Chicago", "Miami", "Phoenix", "Dallas",
          "Portland", "Houston", "Detroit", "Orlando"]
CABINS = ("basic_economy", "economy", "business")
PRODUCTS: dict[str, dict[str, list[str]]] = {
    "T-Shirt": {"color": ["red", "blue", "black", "white"], "size": ["S", "M", "L", "XL"]},
    "Desk Lamp": {"color": ["white", "black", "silver"], "brightness": ["low", "medium", "high"]},
    "Sunglasses": {"lens": ["polarized", "non-polarized"], "frame": ["plastic", "metal"],
                   "color": ["black", "brown", "blue"]},
    "Backpack": {"color": ["green", "grey", "navy"], "size": ["small", "medium", "large"]},
    "Water Bottle": {"capacity": ["500ml", "750ml", "1000ml"], "color": ["red", "blue", "green"]},
    "Running Shoes": {"size": ["8", "9", "10", "11"], "color": ["black", "white", "orange"]},
}


class GeneratorBug(RuntimeError):
    """A scenario's gold action cannot be executed against its own database."""


@dataclass(frozen=True)
class ExpectedTool:
    name: str
    args: dict[str, Any]


@dataclass
class Scenario:
    seed: int
    domain: str
    task_type: str
    database: Database
    initial_message: str
    user_system_prompt: str
    expected_tool: Optional[ExpectedTool]
    expected_answer: Optional[str]
    communicate_info: list[str]
    expects_mutation: bool
    skill: str = "n/a"
    # detail the simulated user reveals only when asked
    disclosure: Optional[str] = None
    extras: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.expects_mutation and self.expected_tool is None:
            raise ValueError("mutation scenarios need an expected tool")

    def digest(self) -> str:
        return content_hash({
            "seed": self.seed, "domain": self.domain, "task_type": self.task_type,
            "database": self.database, "initial_message": self.initial_message,
            "user_system_prompt": self.user_system_prompt,
            "expected_tool": None if self.expected_tool is None
            else [self.expected_tool.name, self.expected_tool.args],
            "expected_answer": self.expected_answer, "communicate_info": self.communicate_info,
            "expects_mutation": self.expects_mutation, "skill": self.skill,
            "disclosure": self.disclosure, "extras": self.extras,
        })


def _weighted_choice(rng: random.Random, weights: dict[str, float]) -> str:
    keys = sorted(weights)
    return rng.choices(keys, weights=[weights[k] for k in keys], k=1)[0]


def _person(rng: random.Random) -> tuple[str, str]:
    first, last = rng.choice(FIRST), rng.choice(LAST)
    return f"{first} {last}", f"{first.lower()}_{last.lower()}_{rng.randint(1000, 9999)}"


def _payment_methods(rng: random.Random) -> dict[str, dict[str, Any]]:
    return {
        f"credit_card_{rng.randint(1000, 9999)}": {"type": "credit_card"},
        f"gift_card_{rng.randint(1000, 9999)}": {"type": "gift_card", "balance": rng.randint(20, 400)},
    }


# ---------------------------------------------------------------------------
# airline

def _create_flights_db(rng: random.Random, n: int) -> dict[str, dict[str, Any]]:
    flights: dict[str, dict[str, Any]] = {}
    origin = rng.choice(CITIES)
    # one flight per destination keeps "the flight to X" unambiguous
    dests = rng.sample([c for c in CITIES if c != origin], n)
    while len(flights) < n:
        num = f"HAT{rng.randint(100, 999)}"
        if num in flights:
            continue
        dest = dests[len(flights)]
        dep = f"{rng.randint(6, 21):02d}:{rng.choice(['00', '15', '30', '45'])}"
        base = rng.randint(60, 200)
        econ = base + rng.randint(40, 150)
        flights[num] = {
            "origin": origin,
            "destination": dest,
            "departure": dep,
            "prices": {"basic_economy": base, "economy": econ, "business": econ + rng.randint(150, 700)},
            "seats": {c: rng.randint(1, 9) for c in CABINS},
        }
    return flights


def _airline_scenario(rng: random.Random, seed: int, task_type: str) -> Scenario:
    flights = _create_flights_db(rng, rng.randint(5, 8))
    name, uid = _person(rng)
    payments = _payment_methods(rng)
    pay_ids = sorted(payments)
    numbers = sorted(flights)
    n_res = rng.randint(4, min(6, len(numbers)))
    chosen = rng.sample(numbers, n_res)
    reservations: dict[str, dict[str, Any]] = {}
    for num in chosen:
        res_id = "".join(rng.choice("ABCDEFGHJKLMNPQRSTUVWXYZ23456789") for _ in range(6))
        cabin = rng.choice(CABINS)
        reservations[res_id] = {
            "flight_number": num, "cabin": cabin, "status": "active",
            "payment_id": rng.choice(pay_ids), "price": flights[num]["prices"][cabin],
        }
    gold = rng.choice(sorted(reservations))
    gold_res = reservations[gold]
    flight = flights[gold_res["flight_number"]]
    db: Database = {"domain": "Airline", "flights": flights,
                    "users": {uid: {"name": name, "payment_methods": payments,
                                    "reservations": reservations}}}

    disclosure = None
    answer = None
    if task_type == "cross_entity_match":
        msg = (f"Hi, I'm {name} (user id {uid}). Please cancel my reservation on the flight "
               f"to {flight['destination']} departing at {flight['departure']}.")
        tool = ExpectedTool("cancel_reservation", {"reservation_id": gold})
        info = [gold]
        goal = f"cancel the reservation to {flight['destination']} at {flight['departure']}"
    elif task_type == "conditional_fallback":
        gold_res["cabin"] = "basic_economy"
        gold_res["price"] = flight["prices"]["basic_economy"]
        business = flight["prices"]["business"]
        affordable = rng.random() < 0.5
        budget = business + rng.randint(0, 80) if affordable else business - rng.randint(1, 120)
        target = "business" if affordable else "economy"
        if flight["seats"][target] <= 0:
            flight["seats"][target] = 1
        msg = (f"Hi, I'm {name} (user id {uid}). For reservation {gold}, please upgrade me to "
               f"business if the business fare is at most ${budget}; otherwise move me to economy.")
        tool = ExpectedTool("update_reservation_cabin", {"reservation_id": gold, "cabin": target})
        info = [f"${flight['prices'][target]}"]
        goal = f"upgrade reservation {gold} to business if <= ${budget}, else economy"
    else:
        msg = f"Hi, I'm {name} (user id {uid}). What is the economy fare on my upcoming flight?"
        disclosure = f"It's my flight to {flight['destination']}."
        answer = f"${flight['prices']['economy']}"
        tool = None
        info = [answer]
        goal = "learn the economy fare of one flight; reveal the destination only when asked"
    return _finish(seed, "Airline", task_type, db, msg, goal, tool, answer, info, disclosure)


# ---------------------------------------------------------------------------
# retail

def _create_products_db(rng: random.Random) -> tuple[dict[str, dict[str, Any]], dict[str, str]]:
    """At least ten variants across the catalogue, each with stock."""
    products: dict[str, dict[str, Any]] = {}
    variant_product: dict[str, str] = {}
    names = rng.sample(sorted(PRODUCTS), rng.randint(3, 5))
    while sum(len(p["variants"]) for p in products.values()) < 10 or len(products) < len(names):
        for pname in names:
            pid = products.get(pname, {}).get("_pid") or str(rng.randint(10**9, 10**10 - 1))
            prod = products.setdefault(pname, {"_pid": pid, "name": pname, "variants": {}})
            attrs = PRODUCTS[pname]
            combo = {k: rng.choice(v) for k, v in sorted(attrs.items())}
            if any(v["attributes"] == combo for v in prod["variants"].values()):
                continue
            item_id = str(rng.randint(10**9, 10**10 - 1))
            prod["variants"][item_id] = {"attributes": combo, "price": round(rng.uniform(10, 300), 2),
                                         "stock": rng.randint(0, 12)}
            variant_product[item_id] = pid
    catalogue = {}
    for pname, prod in products.items():
        pid = prod.pop("_pid")
        catalogue[pid] = prod
    return catalogue, variant_product


def _describe(attrs: dict[str, str]) -> str:
    return ", ".join(f"{k}: {v}" for k, v in sorted(attrs.items()))


def _retail_scenario(rng: random.Random, seed: int, task_type: str) -> Scenario:
    products, variant_product = _create_products_db(rng)
    name, uid = _person(rng)
    all_items = sorted(variant_product)
    orders: dict[str, dict[str, Any]] = {}
    n_orders = rng.randint(4, 6)
    used_items: set[str] = set()
    while len(orders) < n_orders:
        oid = f"#W{rng.randint(10**6, 10**7 - 1)}"
        free = [i for i in all_items if i not in used_items]
        if not free:
            break
        picks = rng.sample(free, min(len(free), rng.randint(1, 2)))
        used_items.update(picks)
        orders[oid] = {
            "status": "delivered",
            "tracking": str(rng.randint(10**11, 10**12 - 1)),
            "payment_id": "",
            "items": [{"item_id": i, "product_id": variant_product[i], "status": "delivered"}
                      for i in picks],
        }
    payments = _payment_methods(rng)
    for o in orders.values():
        o["payment_id"] = rng.choice(sorted(payments))
    db: Database = {"domain": "Retail", "products": products, "variant_product": variant_product,
                    "users": {uid: {"name": name, "payment_methods": payments, "orders": orders}}}

    gold_oid = rng.choice(sorted(orders))
    gold_line = rng.choice(orders[gold_oid]["items"])
    item_id = gold_line["item_id"]
    prod = products[gold_line["product_id"]]
    attrs = prod["variants"][item_id]["attributes"]
    disclosure = None
    answer = None
    if task_type == "cross_entity_match":
        msg = (f"Hi, I'm {name} (user id {uid}). I received a {prod['name']} ({_describe(attrs)}) "
               f"recently and I'd like to return it. Can you find the order and process the return?")
        tool = ExpectedTool("return_order_item", {"order_id": gold_oid, "item_id": item_id})
        info = [gold_oid]
        goal = f"return the {prod['name']} ({_describe(attrs)})"
    elif task_type == "conditional_fallback":
        others = sorted(i for i in prod["variants"] if i != item_id)
        if len(others) < 2:
            # make room for a preferred and a fallback variant
            for _ in range(2 - len(others)):
                new_id = str(rng.randint(10**9, 10**10 - 1))
                combo = {k: rng.choice(v) for k, v in sorted(PRODUCTS[prod["name"]].items())}
                prod["variants"][new_id] = {"attributes": combo, "price": round(rng.uniform(10, 300), 2),
                                            "stock": rng.randint(0, 12)}
                variant_product[new_id] = gold_line["product_id"]
            others = sorted(i for i in prod["variants"] if i != item_id)
        preferred, fallback = rng.sample(others, 2)
        if rng.random() < 0.5:
            prod["variants"][preferred]["stock"] = 0
        if prod["variants"][fallback]["stock"] == 0:
            prod["variants"][fallback]["stock"] = rng.randint(1, 5)
        target = preferred if prod["variants"][preferred]["stock"] > 0 else fallback
        msg = (f"Hi, I'm {name} (user id {uid}). In order {gold_oid} I want to exchange my "
               f"{prod['name']} (item {item_id}) for item {preferred}; if that one is out of stock, "
               f"use item {fallback} instead.")
        tool = ExpectedTool("exchange_order_item",
                            {"order_id": gold_oid, "item_id": item_id, "new_item_id": target})
        info = [target]
        goal = f"exchange item {item_id} for {preferred}, falling back to {fallback}"
    else:
        msg = f"Hi, I'm {name} (user id {uid}). Can you give me the tracking number for my order?"
        disclosure = f"It's the order with the {prod['name']} ({_describe(attrs)})."
        answer = orders[gold_oid]["tracking"]
        tool = None
        info = [answer]
        goal = "get one order's tracking number; say which product only when asked"
    return _finish(seed, "Retail", task_type, db, msg, goal, tool, answer, info, disclosure)


def _finish(seed: int, domain: str, task_type: str, db: Database, msg: str, goal: str,
            tool: Optional[ExpectedTool], answer: Optional[str], info: list[str],
            disclosure: Optional[str]) -> Scenario:
    user_prompt = (
        f"You are a customer talking to a {domain.lower()} support agent. Your goal: {goal}. "
        + (f"Only if the agent asks which one, say: {disclosure} " if disclosure else "")
        + f"When your request has been handled or the agent ends the conversation, reply with {STOP}."
    )
    return Scenario(seed=seed, domain=domain, task_type=task_type, database=db,
                    initial_message=msg, user_system_prompt=user_prompt, expected_tool=tool,
                    expected_answer=answer, communicate_info=info,
                    expects_mutation=tool is not None, disclosure=disclosure)


def generate_sdr_scenario(seed: int, domain_choice: Optional[str] = None,
                          weights: Optional[dict[str, dict[str, float]]] = None) -> Scenario:
    rng = random.Random(f"sdr:{seed}")
    domain = domain_choice or rng.choice(DOMAINS)
    if domain not in DOMAINS:
        raise ValueError(f"unknown domain {domain!r}")
    task_type = _weighted_choice(rng, (weights or SCENARIO_WEIGHTS)[domain])
    if domain == "Airline":
        return _airline_scenario(rng, seed, task_type)
    return _retail_scenario(rng, seed, task_type)


def replay_gold_action(scenario: Scenario) -> Database:
    if not scenario.expects_mutation or scenario.expected_tool is None:
        raise ValueError("scenario has no gold mutation to replay")
    db = copy.deepcopy(scenario.database)
    result, db = execute_tool(scenario.expected_tool.name, scenario.expected_tool.args, db)
    if result.startswith("Error"):
        raise GeneratorBug(f"gold action failed on seed {scenario.seed}: {result}")
    return db


def db_hash(db: Database) -> str:
    return content_hash(db)


def evaluate_sdr_reward(agent_messages: list[str], scenario: Scenario,
                        final_db: Database) -> RewardBreakdown:
    """Tiered reward: 1.0 success, 0.3 correct action with bad info, else 0."""
    transcript = "\n".join(agent_messages)
    comm_pass = all(contains(transcript, v) for v in scenario.communicate_info)
    c = 1.0 if comm_pass else 0.0
    if scenario.expects_mutation:
        db_match = db_hash(final_db) == db_hash(replay_gold_action(scenario))
        d = 1.0 if db_match else 0.0
        if db_match and comm_pass:
            total = FULL
        elif db_match:
            total = PARTIAL
        else:
            total = NONE
        return RewardBreakdown({"db_match": d, "comm_pass": c}, d * c, d, _TIER_ALPHA, total,
                               {"tier": {FULL: "success", PARTIAL: "correct action, bad info",
                                         NONE: "fail"}[total]})
    return RewardBreakdown({"comm_pass": c}, c, c, _TIER_ALPHA, c)


# ---------------------------------------------------------------------------
# user simulation

class UserSimulator(Protocol):
    def reply(self, agent_text: str) -> str: ...


class ScriptedUserSimulator:
    """Reveals the scenario's disclosure once, then ends with the stop token."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.disclosed = False

    def reply(self, agent_text: str) -> str:
        if self.scenario.disclosure and not self.disclosed:
            self.disclosed = True
            return self.scenario.disclosure
        return f"Thanks, that's all. {STOP}"


class GatewayUserSimulator:
    """User simulator backed by a chat model primed with the scenario prompt."""

    def __init__(self, scenario: Scenario, gateway: Any, temperature: float = 0.0,
                 max_tokens: int = 256):
        from ..gateway import ChatRequest

        self._request = ChatRequest
        self.gateway = gateway
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.messages: list[dict[str, str]] = [
            {"role": "system", "content": scenario.user_system_prompt},
            {"role": "assistant", "content": scenario.initial_message},
        ]

    def reply(self, agent_text: str) -> str:
        self.messages.append({"role": "user", "content": agent_text})
        text = self.gateway.complete(self._request(messages=list(self.messages),
                                                  temperature=self.temperature,
                                                  max_tokens=self.max_tokens))
        self.messages.append({"role": "assistant", "content": text})
        return text


SDR_SPEC = EnvSpec(
    name="structured_data_game",
    max_gen_tokens=2048,
    system_prompt=(
        "You are a customer service agent for an airline or retail store. Use tools to look up "
        "records before acting. Call a tool as name({json arguments}); talk to the customer with "
        "'respond: <message>'. Tools: " + ", ".join(sorted(set(tool_names("Airline")) | set(tool_names("Retail"))))
    ),
    success_threshold=1.0,
)


class StructuredDataGame(BaseEnv):
    spec = SDR_SPEC

    def __init__(self, domain_choice: Optional[str] = None, user_factory: Any = None):
        super().__init__()
        self.domain_choice = domain_choice
        self.user_factory = user_factory or ScriptedUserSimulator
        self.scenario: Optional[Scenario] = None
        self.db: Database = {}
        self.agent_messages: list[str] = []
        self._obs = ""
        self.breakdown: Optional[RewardBreakdown] = None

    def reset(self, seed: int) -> None:
        self._clear()
        self.scenario = generate_sdr_scenario(seed, self.domain_choice)
        self.db = copy.deepcopy(self.scenario.database)
        self.user = self.user_factory(self.scenario)
        self.agent_messages = []
        self.breakdown = None
        self._obs = self.scenario.initial_message

    def observe(self, player_id: int) -> str:
        return self._obs

    def legal_actions(self) -> list[str]:
        return tool_names(self.db["domain"]) if self.db else []

    def step(self, action: Optional[str]) -> None:
        self._require_live()
        parsed = self.extract(action)
        if parsed is None:
            self._invalid()
            return
        if isinstance(parsed, ToolCall):
            self._obs, self.db = execute_tool(parsed.name, parsed.args, self.db)
            return
        assert isinstance(parsed, Message)
        self.agent_messages.append(parsed.text)
        reply = self.user.reply(parsed.text)
        if STOP in reply:
            self.breakdown = evaluate_sdr_reward(self.agent_messages, self.scenario, self.db)
            self._terminate(self.breakdown.total)
        else:
            self._obs = reply

    def episode_metadata(self) -> dict[str, str]:
        s = self.scenario
        return {"domain": s.domain, "task_type": s.task_type, "skill": s.skill,
                "expects_mutation": str(s.expects_mutation).lower()}
