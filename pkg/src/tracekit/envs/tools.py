"""Tool executors for the synthetic Airline, Retail and Device databases.

Every tool returns a result string for the agent. Unknown tools and bad
arguments come back as ``Error: ...`` strings rather than exceptions; the
agent sees them like any other tool output. Mutating tools modify the
database in place (callers pass an episode-local copy).
"""

from __future__ import annotations

import json
from typing import Any, Callable

Database = dict[str, Any]

SERVICE_LABELS = {
    "wifi": "Wifi",
    "cellular": "Cellular service",
    "location": "Location service",
}
SERVICE_TOOLS = {
    "wifi": "set_wifi_status",
    "cellular": "set_cellular_status",
    "location": "set_location_service_status",
}
LOOKUP_TOOLS = ("get_current_location", "get_current_timestamp", "get_battery_level")


class ToolArgumentError(ValueError):
    pass


def _dump(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True)


def _arg(args: dict[str, Any], name: str, typ: type | tuple[type, ...]) -> Any:
    if name not in args:
        raise ToolArgumentError(f"missing argument '{name}'")
    val = args[name]
    # bool is an int subclass; keep the two apart
    if typ is str and not isinstance(val, str) or typ is bool and not isinstance(val, bool):
        raise ToolArgumentError(f"argument '{name}' has wrong type")
    return val


def _not_found(kind: str, key: str) -> str:
    return f"Error: {kind} {key} not found"


# ---------------------------------------------------------------------------
# airline

def _find_reservation(db: Database, res_id: str) -> dict[str, Any] | None:
    for user in db["users"].values():
        if res_id in user["reservations"]:
            return user["reservations"][res_id]
    return None


def _get_user_details(db: Database, args: dict[str, Any]) -> str:
    uid = _arg(args, "user_id", str)
    user = db["users"].get(uid)
    return _dump(user) if user is not None else _not_found("user", uid)


def _get_flight_details(db: Database, args: dict[str, Any]) -> str:
    num = _arg(args, "flight_number", str)
    flight = db["flights"].get(num)
    return _dump({"flight_number": num, **flight}) if flight is not None else _not_found("flight", num)


def _search_flights(db: Database, args: dict[str, Any]) -> str:
    dest = _arg(args, "destination", str)
    hits = [
        {"flight_number": num, **f}
        for num, f in sorted(db["flights"].items())
        if f["destination"].lower() == dest.lower()
    ]
    return _dump(hits)


def _get_reservation_details(db: Database, args: dict[str, Any]) -> str:
    res_id = _arg(args, "reservation_id", str)
    res = _find_reservation(db, res_id)
    return _dump({"reservation_id": res_id, **res}) if res is not None else _not_found("reservation", res_id)


def _cancel_reservation(db: Database, args: dict[str, Any]) -> str:
    res_id = _arg(args, "reservation_id", str)
    res = _find_reservation(db, res_id)
    if res is None:
        return _not_found("reservation", res_id)
    if res["status"] == "cancelled":
        return f"Error: reservation {res_id} is already cancelled"
    res["status"] = "cancelled"
    return f"Reservation {res_id} has been cancelled."


def _update_reservation_cabin(db: Database, args: dict[str, Any]) -> str:
    res_id = _arg(args, "reservation_id", str)
    cabin = _arg(args, "cabin", str)
    res = _find_reservation(db, res_id)
    if res is None:
        return _not_found("reservation", res_id)
    flight = db["flights"][res["flight_number"]]
    if cabin not in flight["prices"]:
        return f"Error: unknown cabin {cabin}"
    if flight["seats"][cabin] <= 0:
        return f"Error: no {cabin} seats left on {res['flight_number']}"
    res["cabin"] = cabin
    res["price"] = flight["prices"][cabin]
    return f"Reservation {res_id} is now in {cabin} at ${flight['prices'][cabin]}."


# ---------------------------------------------------------------------------
# retail

def _find_order(db: Database, order_id: str) -> dict[str, Any] | None:
    for user in db["users"].values():
        if order_id in user["orders"]:
            return user["orders"][order_id]
    return None


def _find_variant(db: Database, item_id: str) -> dict[str, Any] | None:
    for prod in db["products"].values():
        if item_id in prod["variants"]:
            return prod["variants"][item_id]
    return None


def _get_order_details(db: Database, args: dict[str, Any]) -> str:
    oid = _arg(args, "order_id", str)
    order = _find_order(db, oid)
    return _dump({"order_id": oid, **order}) if order is not None else _not_found("order", oid)


def _get_product_details(db: Database, args: dict[str, Any]) -> str:
    pid = _arg(args, "product_id", str)
    prod = db["products"].get(pid)
    return _dump({"product_id": pid, **prod}) if prod is not None else _not_found("product", pid)


def _order_line(order: dict[str, Any], item_id: str) -> dict[str, Any] | None:
    for line in order["items"]:
        if line["item_id"] == item_id:
            return line
    return None


def _return_order_item(db: Database, args: dict[str, Any]) -> str:
    oid = _arg(args, "order_id", str)
    item_id = _arg(args, "item_id", str)
    order = _find_order(db, oid)
    if order is None:
        return _not_found("order", oid)
    line = _order_line(order, item_id)
    if line is None:
        return f"Error: item {item_id} is not in order {oid}"
    if line["status"] != "delivered":
        return f"Error: item {item_id} cannot be returned (status {line['status']})"
    line["status"] = "return requested"
    return f"Return requested for item {item_id} in order {oid}."


def _exchange_order_item(db: Database, args: dict[str, Any]) -> str:
    oid = _arg(args, "order_id", str)
    item_id = _arg(args, "item_id", str)
    new_id = _arg(args, "new_item_id", str)
    order = _find_order(db, oid)
    if order is None:
        return _not_found("order", oid)
    line = _order_line(order, item_id)
    if line is None:
        return f"Error: item {item_id} is not in order {oid}"
    if line["status"] != "delivered":
        return f"Error: item {item_id} cannot be exchanged (status {line['status']})"
    new_variant = _find_variant(db, new_id)
    if new_variant is None:
        return _not_found("item", new_id)
    if db["variant_product"][new_id] != line["product_id"]:
        return f"Error: item {new_id} is not a variant of the same product"
    if new_variant["stock"] <= 0:
        return f"Error: item {new_id} is out of stock"
    new_variant["stock"] -= 1
    line["status"] = "exchange requested"
    line["exchange_item_id"] = new_id
    return f"Exchange requested: item {item_id} in order {oid} for item {new_id}."


# ---------------------------------------------------------------------------
# device

def _log(db: Database, name: str) -> None:
    db.setdefault("call_log", []).append(name)


def _get_low_battery_mode_status(db: Database, args: dict[str, Any]) -> str:
    return f"Low battery mode is {'on' if db['settings']['low_battery'] else 'off'}."


def _set_low_battery_mode_status(db: Database, args: dict[str, Any]) -> str:
    on = _arg(args, "on", bool)
    db["settings"]["low_battery"] = on
    return f"Low battery mode is now {'on' if on else 'off'}."


def _make_service_setter(service: str) -> Callable[[Database, dict[str, Any]], str]:
    label = SERVICE_LABELS[service]

    def setter(db: Database, args: dict[str, Any]) -> str:
        on = _arg(args, "on", bool)
        if on and db["settings"]["low_battery"]:
            return f"PermissionError: {label} cannot be turned on in low battery mode"
        db["settings"][service] = on
        return f"{label} is now {'on' if on else 'off'}."

    return setter


def _make_service_getter(service: str) -> Callable[[Database, dict[str, Any]], str]:
    label = SERVICE_LABELS[service]

    def getter(db: Database, args: dict[str, Any]) -> str:
        return f"{label} is {'on' if db['settings'][service] else 'off'}."

    return getter


def _get_current_location(db: Database, args: dict[str, Any]) -> str:
    if not db["settings"]["location"]:
        return "Error: location service is off"
    loc = db["location"]
    return f"Current location: latitude {loc['latitude']}, longitude {loc['longitude']}"


def _get_current_timestamp(db: Database, args: dict[str, Any]) -> str:
    return f"Current timestamp: {db['timestamp']}"


def _get_battery_level(db: Database, args: dict[str, Any]) -> str:
    return f"Battery level: {db['battery_level']}%"


def _search_contacts(db: Database, args: dict[str, Any]) -> str:
    name = _arg(args, "name", str)
    hits = {k: v for k, v in sorted(db["contacts"].items()) if name.lower() in k.lower()}
    return _dump(hits) if hits else _not_found("contact", name)


AIRLINE_TOOLS: dict[str, Callable[[Database, dict[str, Any]], str]] = {
    "get_user_details": _get_user_details,
    "get_flight_details": _get_flight_details,
    "search_flights": _search_flights,
    "get_reservation_details": _get_reservation_details,
    "cancel_reservation": _cancel_reservation,
    "update_reservation_cabin": _update_reservation_cabin,
}
RETAIL_TOOLS: dict[str, Callable[[Database, dict[str, Any]], str]] = {
    "get_user_details": _get_user_details,
    "get_order_details": _get_order_details,
    "get_product_details": _get_product_details,
    "return_order_item": _return_order_item,
    "exchange_order_item": _exchange_order_item,
}
DEVICE_TOOLS: dict[str, Callable[[Database, dict[str, Any]], str]] = {
    "get_low_battery_mode_status": _get_low_battery_mode_status,
    "set_low_battery_mode_status": _set_low_battery_mode_status,
    "get_wifi_status": _make_service_getter("wifi"),
    "get_cellular_status": _make_service_getter("cellular"),
    "get_location_service_status": _make_service_getter("location"),
    "get_current_location": _get_current_location,
    "get_current_timestamp": _get_current_timestamp,
    "get_battery_level": _get_battery_level,
    "search_contacts": _search_contacts,
}
for _svc, _tool in SERVICE_TOOLS.items():
    DEVICE_TOOLS[_tool] = _make_service_setter(_svc)

TOOLSETS = {"Airline": AIRLINE_TOOLS, "Retail": RETAIL_TOOLS, "Device": DEVICE_TOOLS}


def tool_names(domain: str) -> list[str]:
    return sorted(TOOLSETS[domain])


def execute_tool(name: str, args: dict[str, Any], database: Database) -> tuple[str, Database]:
    """Run ``name(**args)`` against ``database``; returns (result, database)."""
    tools = TOOLSETS[database["domain"]]
    if database["domain"] == "Device":
        _log(database, name)
    fn = tools.get(name)
    if fn is None:
        return f"Error: unknown tool '{name}'", database
    if not isinstance(args, dict):
        return f"Error: invalid arguments for {name}: expected an object", database
    try:
        return fn(database, args), database
    except ToolArgumentError as exc:
        return f"Error: invalid arguments for {name}: {exc}", database
