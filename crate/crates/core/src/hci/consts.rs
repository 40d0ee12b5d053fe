//! Standard HCI opcodes, event codes and status values used by the command
//! surface.

pub const H4_COMMAND: u8 = 0x01;
pub const H4_ACL: u8 = 0x02;
pub const H4_SCO: u8 = 0x03;
pub const H4_EVENT: u8 = 0x04;

pub const OP_INQUIRY: u16 = 0x0401;
pub const OP_CREATE_CONNECTION: u16 = 0x0405;
pub const OP_LINK_KEY_REQUEST_REPLY: u16 = 0x040b;
pub const OP_LINK_KEY_REQUEST_NEG_REPLY: u16 = 0x040c;
pub const OP_REMOTE_NAME_REQUEST: u16 = 0x0419;
pub const OP_RESET: u16 = 0x0c03;
pub const OP_READ_BUFFER_SIZE: u16 = 0x1005;
pub const OP_LE_SET_SCAN_ENABLE: u16 = 0x200c;

pub const EV_INQUIRY_COMPLETE: u8 = 0x01;
pub const EV_CONNECTION_COMPLETE: u8 = 0x03;
pub const EV_DISCONNECTION_COMPLETE: u8 = 0x05;
pub const EV_REMOTE_NAME_COMPLETE: u8 = 0x07;
pub const EV_COMMAND_COMPLETE: u8 = 0x0e;
pub const EV_COMMAND_STATUS: u8 = 0x0f;
pub const EV_LINK_KEY_REQUEST: u8 = 0x17;
pub const EV_EXT_INQUIRY_RESULT: u8 = 0x2f;
pub const EV_LE_META: u8 = 0x3e;
pub const LE_ADVERTISING_REPORT: u8 = 0x02;

pub const STATUS_SUCCESS: u8 = 0x00;
pub const STATUS_UNKNOWN_COMMAND: u8 = 0x01;
pub const STATUS_UNKNOWN_CONNECTION: u8 = 0x02;
pub const STATUS_PIN_OR_KEY_MISSING: u8 = 0x06;
pub const STATUS_CONNECTION_LIMIT: u8 = 0x09;
pub const STATUS_INVALID_PARAMS: u8 = 0x12;
pub const STATUS_REMOTE_TERMINATED: u8 = 0x13;

pub fn opcode_name(op: u16) -> &'static str {
    match op {
        OP_INQUIRY => "Inquiry",
        OP_CREATE_CONNECTION => "Create_Connection",
        OP_LINK_KEY_REQUEST_REPLY => "Link_Key_Request_Reply",
        OP_LINK_KEY_REQUEST_NEG_REPLY => "Link_Key_Request_Negative_Reply",
        OP_REMOTE_NAME_REQUEST => "Remote_Name_Request",
        OP_RESET => "Reset",
        OP_READ_BUFFER_SIZE => "Read_Buffer_Size",
        OP_LE_SET_SCAN_ENABLE => "LE_Set_Scan_Enable",
        _ => "unknown",
    }
}
